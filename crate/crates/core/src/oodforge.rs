//! Fake-OOD synthesis in embedding space: class-conditional Gaussians, a
//! low-density rejection sampler and the balanced binary training set.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ArosError, Result};
use crate::linalg::{cholesky, logdet_from_cholesky, solve_lower};
use crate::seed::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Ridge added to every class covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// `λ = c · trace(Σ̂_j) / d` (falls back to `c` for a zero-trace class).
    Relative(f64),
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-4)
    }
}

/// How `beta` is compared with a class density.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaScale {
    /// Accept `r` iff `p(r | j) < β`.
    #[default]
    Absolute,
    /// Accept `r` iff `p(r | j) < β · p_typ(j)`, where `p_typ` is the density
    /// at the typical radius (`E[log p] = log p(μ̂_j) − d/2`). Free of the
    /// embedding units and of the dimension: the cut is `M² > d + 2 ln(1/β)`.
    TypicalRelative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussians {
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    /// Ridged covariances.
    pub covariances: Vec<Tensor>,
    pub counts: Vec<usize>,
    pub ridges: Vec<f64>,
    chol: Vec<Tensor>,
    logdet: Vec<f64>,
}

impl ClassGaussians {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    /// Rebuilds the cached factors, e.g. after deserializing edited covariances.
    pub fn refactor(&mut self) -> Result<()> {
        self.chol = self.covariances.iter().map(cholesky).collect::<Result<_>>()?;
        self.logdet = self.chol.iter().map(logdet_from_cholesky).collect();
        Ok(())
    }

    fn check(&self, j: usize, r: &[f64]) -> Result<()> {
        if j >= self.num_classes() {
            return Err(ArosError::contract(format!(
                "class {j} outside 0..{}",
                self.num_classes()
            )));
        }
        if r.len() != self.dim {
            return Err(ArosError::Shape {
                op: "gaussian_logdensity",
                lhs: vec![r.len()],
                rhs: vec![self.dim],
            });
        }
        Ok(())
    }

    /// `(r − μ̂_j)ᵀ Σ̂_j⁻¹ (r − μ̂_j)`.
    pub fn mahalanobis_sq(&self, j: usize, r: &[f64]) -> Result<f64> {
        self.check(j, r)?;
        let diff: Vec<f64> = r.iter().zip(&self.means[j]).map(|(a, b)| a - b).collect();
        Ok(solve_lower(&self.chol[j], &diff).iter().map(|v| v * v).sum())
    }

    /// Log-density at the class mean.
    pub fn peak_logdensity(&self, j: usize) -> f64 {
        -0.5 * self.dim as f64 * LN_2PI - 0.5 * self.logdet[j]
    }
}

/// Class mean and unbiased covariance (divisor `n − 1`).
pub fn class_moments(rows: &[&[f64]]) -> (Vec<f64>, Tensor) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = Tensor::zeros(&[d, d]);
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let cd = cov.data_mut();
        for i in 0..d {
            for j in 0..d {
                cd[i * d + j] += c[i] * c[j];
            }
        }
    }
    cov.data_mut().iter_mut().for_each(|v| *v /= n - 1.0);
    (mean, cov)
}

pub fn fit_class_gaussians(
    embeddings: &Tensor,
    labels: &[usize],
    num_classes: usize,
    ridge: Ridge,
) -> Result<ClassGaussians> {
    let (n, d) = embeddings.dims2()?;
    if labels.len() != n {
        return Err(ArosError::contract(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    let mut means = Vec::new();
    let mut covariances = Vec::new();
    let mut counts = Vec::new();
    let mut ridges = Vec::new();
    for j in 0..num_classes {
        let rows: Vec<&[f64]> = (0..n).filter(|&i| labels[i] == j).map(|i| embeddings.row(i)).collect();
        if rows.len() < 2 {
            return Err(ArosError::TooFewSamples {
                class: j,
                count: rows.len(),
            });
        }
        let (mean, mut cov) = class_moments(&rows);
        let lambda = match ridge {
            Ridge::Absolute(l) => l,
            Ridge::Relative(c) => {
                let tr: f64 = (0..d).map(|i| cov.at(i, i)).sum::<f64>() / d as f64;
                if tr > 0.0 {
                    c * tr
                } else {
                    c
                }
            }
        };
        for i in 0..d {
            cov.data_mut()[i * d + i] += lambda;
        }
        counts.push(rows.len());
        means.push(mean);
        covariances.push(cov);
        ridges.push(lambda);
    }
    let mut g = ClassGaussians {
        dim: d,
        means,
        covariances,
        counts,
        ridges,
        chol: Vec::new(),
        logdet: Vec::new(),
    };
    g.refactor()?;
    Ok(g)
}

pub fn gaussian_logdensity(g: &ClassGaussians, j: usize, r: &[f64]) -> Result<f64> {
    let q = g.mahalanobis_sq(j, r)?;
    Ok(g.peak_logdensity(j) - 0.5 * q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub beta: f64,
    pub beta_scale: BetaScale,
    pub max_tries_factor: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            beta_scale: BetaScale::Absolute,
            max_tries_factor: 1000,
        }
    }
}

impl SamplerConfig {
    /// Log-density threshold for class `j`.
    pub fn log_threshold(&self, g: &ClassGaussians, j: usize) -> f64 {
        match self.beta_scale {
            BetaScale::Absolute => self.beta.ln(),
            BetaScale::TypicalRelative => self.beta.ln() + g.peak_logdensity(j) - 0.5 * g.dim as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeSamples {
    /// `(K · m, d)`, class-major.
    pub embeddings: Tensor,
    pub classes: Vec<usize>,
    pub draws: Vec<usize>,
    pub acceptance_rate: f64,
}

/// Draws `r ~ N(μ̂_j, Σ̂_j)` and keeps it iff its density is below the
/// threshold, until `m_per_class` samples per class are accepted.
pub fn sample_fake_ood(g: &ClassGaussians, cfg: &SamplerConfig, m_per_class: usize, seed: u64) -> Result<FakeSamples> {
    if !(cfg.beta > 0.0) {
        return Err(ArosError::contract(format!("beta must be > 0, got {}", cfg.beta)));
    }
    if m_per_class == 0 {
        return Err(ArosError::contract("m_per_class must be >= 1"));
    }
    let d = g.dim;
    let budget = cfg.max_tries_factor.saturating_mul(m_per_class);
    let mut data = Vec::with_capacity(g.num_classes() * m_per_class * d);
    let mut classes = Vec::new();
    let mut draws = Vec::new();
    for j in 0..g.num_classes() {
        let mut rng = stream(seed, "oodforge.class", j as u64);
        let thr = cfg.log_threshold(g, j);
        let l = &g.chol[j];
        let mut accepted = 0;
        let mut tries = 0;
        let mut eps = vec![0.0; d];
        while accepted < m_per_class {
            if tries >= budget {
                return Err(ArosError::SamplingExhausted {
                    class: j,
                    accepted,
                    wanted: m_per_class,
                    draws: tries,
                    rate: accepted as f64 / tries.max(1) as f64,
                });
            }
            tries += 1;
            eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
            // r = μ + L·ε, so the squared Mahalanobis distance is ||ε||².
            let logp = g.peak_logdensity(j) - 0.5 * eps.iter().map(|e| e * e).sum::<f64>();
            if logp < thr {
                for i in 0..d {
                    let mut v = g.means[j][i];
                    for k in 0..=i {
                        v += l.data()[i * d + k] * eps[k];
                    }
                    data.push(v);
                }
                classes.push(j);
                accepted += 1;
            }
        }
        draws.push(tries);
    }
    let total: usize = draws.iter().sum();
    Ok(FakeSamples {
        embeddings: Tensor::matrix(classes.len(), d, data)?,
        acceptance_rate: classes.len() as f64 / total as f64,
        classes,
        draws,
    })
}

/// Re-evaluates every fake against its class threshold; returns the number
/// of violations.
pub fn verify_fakes(g: &ClassGaussians, cfg: &SamplerConfig, fakes: &FakeSamples) -> Result<usize> {
    let mut bad = 0;
    for (i, &j) in fakes.classes.iter().enumerate() {
        if gaussian_logdensity(g, j, fakes.embeddings.row(i))? >= cfg.log_threshold(g, j) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Uniform noise in the axis-aligned bounding box of `reference`.
pub fn sample_uniform_box(reference: &Tensor, count: usize, seed: u64) -> Result<Tensor> {
    let (n, d) = reference.dims2()?;
    if n == 0 {
        return Err(ArosError::contract("empty reference set"));
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for (k, &v) in reference.row(i).iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let mut rng = rng_from(derive_seed(seed, "oodforge.uniform", 0));
    let data = (0..count * d)
        .map(|i| {
            let k = i % d;
            lo[k] + (hi[k] - lo[k]) * rng.gen::<f64>()
        })
        .collect();
    Tensor::matrix(count, d, data)
}

/// Binary training set: label 0 for ID embeddings, 1 for fakes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let ood = self.labels.iter().filter(|&&y| y == 1).count();
        (self.len() - ood, ood)
    }

    pub fn subset(&self, idx: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            embeddings: self.embeddings.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Concatenates and shuffles; the counts may differ by at most `num_classes`.
pub fn build_embedding_set(id: &Tensor, fake: &Tensor, num_classes: usize, seed: u64) -> Result<EmbeddingSet> {
    let (n_id, d) = id.dims2()?;
    let (n_fake, d2) = fake.dims2()?;
    if d != d2 {
        return Err(ArosError::Shape {
            op: "build_embedding_set",
            lhs: id.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        });
    }
    if n_id.abs_diff(n_fake) > num_classes {
        return Err(ArosError::contract(format!(
            "unbalanced embedding set: {n_id} ID vs {n_fake} fake (K = {num_classes})"
        )));
    }
    let all = Tensor::concat_rows(&[id, fake])?;
    let mut labels = vec![0; n_id];
    labels.extend(std::iter::repeat(1).take(n_fake));
    let mut order: Vec<usize> = (0..all.rows()).collect();
    order.shuffle(&mut rng_from(derive_seed(seed, "oodforge.shuffle", 0)));
    Ok(EmbeddingSet {
        embeddings: all.gather_rows(&order),
        labels: order.iter().map(|&i| labels[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_before_ridge() {
        let x = Tensor::from_rows(&[&[0.0, 0.0], &[2.0, 0.0], &[1.0, 3.0]]);
        let g = fit_class_gaussians(&x, &[0, 0, 0], 1, Ridge::Absolute(0.0)).unwrap();
        assert_eq!(g.means[0], vec![1.0, 1.0]);
        assert_eq!(g.covariances[0].data(), &[1.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn identical_points_give_ridge_only() {
        let x = Tensor::filled(&[4, 3], 0.7);
        let g = fit_class_gaussians(&x, &[0; 4], 1, Ridge::Absolute(0.01)).unwrap();
        let want = Tensor::eye(3).map(|v| v * 0.01);
        assert_eq!(g.covariances[0], want);
    }

    #[test]
    fn singleton_class_rejected() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            fit_class_gaussians(&x, &[0, 0, 1], 2, Ridge::default()),
            Err(ArosError::TooFewSamples { class: 1, count: 1 })
        ));
    }

    #[test]
    fn logdensity_at_mean_of_unit_gaussian() {
        let x = Tensor::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        let mut g = fit_class_gaussians(&x, &[0; 4], 1, Ridge::Absolute(0.0)).unwrap();
        g.covariances[0] = Tensor::eye(2);
        g.refactor().unwrap();
        let lp = gaussian_logdensity(&g, 0, &[0.0, 0.0]).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let near = gaussian_logdensity(&g, 0, &[0.5, 0.0]).unwrap();
        let far = gaussian_logdensity(&g, 0, &[1.5, 0.5]).unwrap();
        assert!(lp > near && near > far);
    }

    fn unit_gaussians(d: usize) -> ClassGaussians {
        let mut rows = Vec::new();
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            rows.push(e.clone());
            e[i] = -1.0;
            rows.push(e);
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut g = fit_class_gaussians(&Tensor::from_rows(&refs), &vec![0; 2 * d], 1, Ridge::Absolute(0.0)).unwrap();
        g.covariances[0] = Tensor::eye(d);
        g.refactor().unwrap();
        g
    }

    #[test]
    fn huge_beta_accepts_everything() {
        let g = unit_gaussians(3);
        let cfg = SamplerConfig {
            beta: 1e6,
            ..Default::default()
        };
        let f = sample_fake_ood(&g, &cfg, 25, 9).unwrap();
        assert_eq!(f.acceptance_rate, 1.0);
        assert_eq!(f.embeddings.shape(), &[25, 3]);
    }

    #[test]
    fn fakes_reverify_and_are_deterministic() {
        let g = unit_gaussians(2);
        let cfg = SamplerConfig {
            beta: 0.05,
            ..Default::default()
        };
        let a = sample_fake_ood(&g, &cfg, 40, 1).unwrap();
        assert_eq!(verify_fakes(&g, &cfg, &a).unwrap(), 0);
        assert!(a.acceptance_rate < 1.0);
        assert_eq!(a, sample_fake_ood(&g, &cfg, 40, 1).unwrap());
    }

    #[test]
    fn typical_relative_cut_is_a_mahalanobis_radius() {
        let g = unit_gaussians(16);
        let cfg = SamplerConfig {
            beta: 1e-3,
            beta_scale: BetaScale::TypicalRelative,
            ..Default::default()
        };
        let f = sample_fake_ood(&g, &cfg, 30, 4).unwrap();
        let cut = 16.0 + 2.0 * 1e3f64.ln();
        for i in 0..f.embeddings.rows() {
            assert!(g.mahalanobis_sq(0, f.embeddings.row(i)).unwrap() > cut);
        }
        // P(χ²₁₆ > 29.82) ≈ 0.0203
        assert!(
            f.acceptance_rate > 0.005 && f.acceptance_rate < 0.06,
            "{}",
            f.acceptance_rate
        );
    }

    #[test]
    fn impossible_threshold_exhausts() {
        let g = unit_gaussians(2);
        let cfg = SamplerConfig {
            beta: 1e-300,
            beta_scale: BetaScale::Absolute,
            max_tries_factor: 5,
        };
        match sample_fake_ood(&g, &cfg, 2, 0) {
            Err(ArosError::SamplingExhausted { draws, accepted, .. }) => {
                assert_eq!(draws, 10);
                assert_eq!(accepted, 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn embedding_set_balance_and_labels() {
        let id = Tensor::filled(&[100, 2], 0.0);
        let fake = Tensor::filled(&[100, 2], 1.0);
        let s = build_embedding_set(&id, &fake, 2, 3).unwrap();
        assert_eq!(s.label_counts(), (100, 100));
        for i in 0..s.len() {
            assert_eq!(s.embeddings.row(i)[0], s.labels[i] as f64);
        }
        let lopsided = Tensor::filled(&[97, 2], 1.0);
        assert!(build_embedding_set(&id, &lopsided, 2, 3).is_err());
    }

    #[test]
    fn uniform_box_stays_in_bounds() {
        let r = Tensor::from_rows(&[&[0.0, -1.0], &[2.0, 1.0]]);
        let u = sample_uniform_box(&r, 50, 0).unwrap();
        for i in 0..50 {
            let row = u.row(i);
            assert!((0.0..=2.0).contains(&row[0]) && (-1.0..=1.0).contains(&row[1]));
        }
    }
}
