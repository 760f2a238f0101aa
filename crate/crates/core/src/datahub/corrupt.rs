//! Semantics-preserving corruptions at five severities.
//!
//! Severity tables (index = severity − 1). Noise magnitudes are fractions of
//! the value range: `[0, 1]` for images, unit scale for synthetic data.
//!
//! | kind           | parameter                    | 1    | 2    | 3    | 4    | 5    |
//! |----------------|------------------------------|------|------|------|------|------|
//! | gaussian_noise | stddev                       | 0.04 | 0.06 | 0.08 | 0.09 | 0.10 |
//! | shot_noise     | photon count λ               | 60   | 25   | 12   | 5    | 3    |
//! | impulse_noise  | fraction of replaced entries | 0.03 | 0.06 | 0.09 | 0.17 | 0.27 |
//! | defocus_blur   | disk radius (pixels)         | 1    | 1.5  | 2    | 2.5  | 3    |
//! | brightness     | additive shift               | 0.1  | 0.2  | 0.3  | 0.4  | 0.5  |
//! | contrast       | scale around the image mean  | 0.4  | 0.3  | 0.2  | 0.1  | 0.05 |

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain};
use crate::error::{ArosError, Result};
use crate::seed::rng_from;

pub const GAUSSIAN_STD: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
pub const SHOT_LAMBDA: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
pub const IMPULSE_FRACTION: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
pub const BLUR_RADIUS: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const CONTRAST_SCALE: [f64; 5] = [0.4, 0.3, 0.2, 0.1, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Brightness,
    Contrast,
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }

    fn is_noise(self) -> bool {
        matches!(
            self,
            CorruptionKind::GaussianNoise | CorruptionKind::ShotNoise | CorruptionKind::ImpulseNoise
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let s = Self { kind, severity };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(ArosError::contract(format!(
                "corruption severity {} outside 1..=5",
                self.severity
            )));
        }
        Ok(())
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.kind.name(), self.severity)
    }
}

fn finish(data: &Dataset, mut values: Vec<f64>) -> Result<Dataset> {
    if data.domain == Domain::Image {
        values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    let mut out = data.clone();
    out.inputs.data_mut().copy_from_slice(&values);
    Ok(out)
}

/// Additive Gaussian noise of a given stddev; `sigma = 0` is the identity.
pub fn gaussian_noise_with_sigma(data: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    if sigma == 0.0 {
        return Ok(data.clone());
    }
    let normal =
        Normal::new(0.0, sigma).map_err(|e| ArosError::contract(format!("gaussian noise sigma {sigma}: {e}")))?;
    let mut rng = rng_from(seed);
    let values = data.inputs.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
    finish(data, values)
}

pub fn corrupt(data: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if data.domain == Domain::Synthetic2d && !spec.kind.is_noise() {
        return Err(ArosError::UnsupportedCorruption {
            kind: spec.kind.name().into(),
            domain: data.domain.to_string(),
        });
    }
    let lvl = spec.level();
    let mut rng = rng_from(seed);
    let src = data.inputs.data();
    match spec.kind {
        CorruptionKind::GaussianNoise => gaussian_noise_with_sigma(data, GAUSSIAN_STD[lvl], seed),
        CorruptionKind::ShotNoise => {
            let lam = SHOT_LAMBDA[lvl];
            let values = match data.domain {
                Domain::Image => src
                    .iter()
                    .map(|&v| {
                        let rate = v * lam;
                        if rate <= 0.0 {
                            0.0
                        } else {
                            Poisson::new(rate).expect("positive rate").sample(&mut rng) / lam
                        }
                    })
                    .collect(),
                // Gaussian approximation of Poisson noise on signed coordinates.
                Domain::Synthetic2d => src
                    .iter()
                    .map(|&v| {
                        let sd = (v.abs() / lam).sqrt();
                        v + sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
                    })
                    .collect(),
            };
            finish(data, values)
        }
        CorruptionKind::ImpulseNoise => {
            let mut values = src.to_vec();
            let n = values.len();
            let count = (IMPULSE_FRACTION[lvl] * n as f64).round() as usize;
            let (lo, hi) = match data.domain {
                Domain::Image => (vec![0.0], vec![1.0]),
                Domain::Synthetic2d => coordinate_bounds(data),
            };
            let width = lo.len();
            for i in sample(&mut rng, n, count) {
                let c = i % width;
                values[i] = if rng.gen_bool(0.5) { hi[c] } else { lo[c] };
            }
            finish(data, values)
        }
        CorruptionKind::DefocusBlur => blur(data, BLUR_RADIUS[lvl]),
        CorruptionKind::Brightness => {
            let shift = BRIGHTNESS_SHIFT[lvl];
            finish(data, src.iter().map(|v| v + shift).collect())
        }
        CorruptionKind::Contrast => {
            let c = CONTRAST_SCALE[lvl];
            let per = data.inputs.row_len();
            let mut values = Vec::with_capacity(src.len());
            for img in src.chunks(per) {
                let mean = img.iter().sum::<f64>() / per as f64;
                values.extend(img.iter().map(|v| (v - mean) * c + mean));
            }
            finish(data, values)
        }
    }
}

fn coordinate_bounds(data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let d = data.inputs.row_len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in data.inputs.data().chunks(d) {
        for (j, &v) in row.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    (lo, hi)
}

/// Uniform disk kernel with edge clamping.
fn blur(data: &Dataset, radius: f64) -> Result<Dataset> {
    let [_, h, w] = data.inputs.shape() else {
        return Err(ArosError::Shape {
            op: "defocus_blur",
            lhs: data.inputs.shape().to_vec(),
            rhs: vec![],
        });
    };
    let (h, w) = (*h as isize, *w as isize);
    let r = radius.ceil() as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|di| (-r..=r).map(move |dj| (di, dj)))
        .filter(|&(di, dj)| ((di * di + dj * dj) as f64) <= radius * radius)
        .collect();
    let norm = offsets.len() as f64;
    let per = (h * w) as usize;
    let mut values = Vec::with_capacity(data.inputs.len());
    for img in data.inputs.data().chunks(per) {
        for i in 0..h {
            for j in 0..w {
                let s: f64 = offsets
                    .iter()
                    .map(|&(di, dj)| {
                        let (y, x) = ((i + di).clamp(0, h - 1), (j + dj).clamp(0, w - 1));
                        img[(y * w + x) as usize]
                    })
                    .sum();
                values.push(s / norm);
            }
        }
    }
    finish(data, values)
}
