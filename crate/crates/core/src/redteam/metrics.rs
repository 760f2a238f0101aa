//! Threshold-free detection metrics with OOD as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{ArosError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
}

impl Metrics {
    pub fn compute(id: &[f64], ood: &[f64]) -> Result<Self> {
        Ok(Self {
            auroc: auroc(id, ood)?,
            aupr: aupr(id, ood)?,
            fpr95: fpr95(id, ood)?,
        })
    }
}

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(ArosError::contract("metrics need nonempty ID and OOD score arrays"));
    }
    if id.iter().chain(ood).any(|s| s.is_nan()) {
        return Err(ArosError::Numeric("NaN detection score".into()));
    }
    Ok(())
}

/// `P(ood > id) + ½·P(ood = id)` via average ranks.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, false))
        .chain(ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Ranks are doubled to stay integral under averaging.
    let mut rank_sum2 = 0u128;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u128;
        rank_sum2 += avg2 * all[i..=j].iter().filter(|e| e.1).count() as u128;
        i = j + 1;
    }
    let (n_i, n_o) = (id.len() as u128, ood.len() as u128);
    let u2 = rank_sum2 - n_o * (n_o + 1);
    Ok(u2 as f64 / (2 * n_i * n_o) as f64)
}

/// `(fp, tp)` counts at every distinct threshold, descending; `s ≥ t` is flagged OOD.
fn sweep(id: &[f64], ood: &[f64]) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, false))
        .chain(ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut fp, mut tp) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((fp, tp));
    }
    out
}

/// Trapezoidal area under precision–recall, starting from (recall 0, precision 1).
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let n_o = ood.len() as f64;
    let (mut r0, mut p0) = (0.0, 1.0);
    let mut area = 0.0;
    for (fp, tp) in sweep(id, ood) {
        let r = tp as f64 / n_o;
        let p = tp as f64 / (tp + fp) as f64;
        area += (r - r0) * (p + p0) / 2.0;
        r0 = r;
        p0 = p;
    }
    Ok(area)
}

/// Lowest false-positive rate among thresholds whose TPR reaches 0.95.
pub fn fpr95(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let (n_i, n_o) = (id.len() as f64, ood.len() as f64);
    Ok(sweep(id, ood)
        .into_iter()
        .find(|&(_, tp)| tp as f64 / n_o >= 0.95)
        .map(|(fp, _)| fp as f64 / n_i)
        .expect("the lowest threshold flags every sample"))
}
