//! Desk-scale datasets: synthetic 2-D generators, the IDX image format,
//! stratified splits, CSV I/O and non-adversarial corruptions.

mod corrupt;
mod csvio;
mod idx;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

pub use corrupt::{corrupt, gaussian_noise_with_sigma, CorruptionKind, CorruptionSpec};
pub use csvio::{read_csv, write_csv};
pub use idx::{parse_idx, write_idx_images, write_idx_labels, IdxPayload};
pub use split::split;
pub use synth::{gen_blob, gen_ring, gen_two_moons};

use crate::error::{ArosError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Synthetic2d,
    Image,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Synthetic2d => "synthetic2d",
            Domain::Image => "image",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `(n, d)` for synthetic data, `(n, H, W)` for images.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub domain: Domain,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, domain: Domain) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            num_classes,
            domain,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.inputs.rows() {
            return Err(ArosError::contract(format!(
                "{} labels for {} inputs",
                self.labels.len(),
                self.inputs.rows()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(ArosError::contract(format!(
                "label {bad} outside 0..{}",
                self.num_classes
            )));
        }
        if self.domain == Domain::Image && self.inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ArosError::contract("image values outside [0, 1]"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape (without the leading count).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}
