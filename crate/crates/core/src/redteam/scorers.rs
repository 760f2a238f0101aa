//! OOD scorers: the detector itself and the post-hoc MSP and Mahalanobis
//! baselines. Higher always means more OOD-like.

use serde::{Deserialize, Serialize};

use crate::adgraph::{Tape, Var};
use crate::error::{ArosError, Result};
use crate::linalg::{cholesky, solve_lower};
use crate::oodforge::class_moments;
use crate::pretrain::{Classifier, Encoder};
use crate::stabnet::ArosModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Aros,
    Msp,
    Md,
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScorerKind::Aros => "aros",
            ScorerKind::Msp => "msp",
            ScorerKind::Md => "md",
        })
    }
}

pub trait Scorer: Sync {
    fn kind(&self) -> ScorerKind;

    /// Records `x ↦ S(x)` on `tape`, returning the `(B)` score node.
    fn score_graph(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let s = self.score_graph(&mut tape, xv)?;
        Ok(tape.value(s).data().to_vec())
    }
}

impl Scorer for ArosModel {
    fn kind(&self) -> ScorerKind {
        ScorerKind::Aros
    }

    fn score_graph(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        ArosModel::score_graph(self, tape, x)
    }

    fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.ood_score(x)
    }
}

/// `1 − max_c softmax(logits)_c`.
pub struct MspScorer<'a> {
    pub classifier: &'a Classifier,
}

impl Scorer for MspScorer<'_> {
    fn kind(&self) -> ScorerKind {
        ScorerKind::Msp
    }

    fn score_graph(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.classifier.encoder.check_input(tape.value(x))?;
        let vars = self.classifier.register(tape, false)?;
        let logits = self.classifier.logits(tape, &vars, x)?;
        let p = tape.row_softmax(logits)?;
        let m = tape.row_max(p)?;
        let neg = tape.neg(m);
        Ok(tape.add_scalar(neg, 1.0))
    }
}

/// Class means with one pooled (shared) covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledGaussian {
    pub means: Vec<Vec<f64>>,
    pub covariance: Tensor,
    chol: Tensor,
}

impl PooledGaussian {
    /// Pooled within-class covariance (divisor `N − K`) plus `ridge · I`.
    pub fn fit(embeddings: &Tensor, labels: &[usize], num_classes: usize, ridge: f64) -> Result<Self> {
        let (n, d) = embeddings.dims2()?;
        if n <= num_classes {
            return Err(ArosError::contract("pooled covariance needs N > K"));
        }
        let mut means = Vec::with_capacity(num_classes);
        let mut scatter = Tensor::zeros(&[d, d]);
        for j in 0..num_classes {
            let rows: Vec<&[f64]> = (0..n).filter(|&i| labels[i] == j).map(|i| embeddings.row(i)).collect();
            if rows.len() < 2 {
                return Err(ArosError::TooFewSamples {
                    class: j,
                    count: rows.len(),
                });
            }
            let (mean, cov) = class_moments(&rows);
            let w = (rows.len() - 1) as f64;
            for (s, c) in scatter.data_mut().iter_mut().zip(cov.data()) {
                *s += w * c;
            }
            means.push(mean);
        }
        let denom = (n - num_classes) as f64;
        let mut covariance = scatter.map(|v| v / denom);
        for i in 0..d {
            covariance.data_mut()[i * d + i] += ridge;
        }
        Self::from_parts(means, covariance)
    }

    pub fn from_parts(means: Vec<Vec<f64>>, covariance: Tensor) -> Result<Self> {
        let chol = cholesky(&covariance)?;
        Ok(Self {
            means,
            covariance,
            chol,
        })
    }

    /// `min_k (z − μ_k)ᵀ Σ⁻¹ (z − μ_k)` on plain values.
    pub fn min_mahalanobis_sq(&self, z: &[f64]) -> f64 {
        self.means
            .iter()
            .map(|m| {
                let diff: Vec<f64> = z.iter().zip(m).map(|(a, b)| a - b).collect();
                solve_lower(&self.chol, &diff).iter().map(|v| v * v).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// `(L⁻¹)ᵀ`, so that `(z − μ)·L⁻ᵀ` has squared norm equal to the Mahalanobis distance.
    fn whitening(&self) -> Tensor {
        let d = self.chol.shape()[0];
        let mut out = Tensor::zeros(&[d, d]);
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            let col = solve_lower(&self.chol, &e);
            for (i, v) in col.into_iter().enumerate() {
                // column j of L⁻¹ is row j of L⁻ᵀ
                out.set(j, i, v);
            }
        }
        out
    }
}

/// Minimum squared Mahalanobis distance of the embedding to any class mean.
pub struct MdScorer<'a> {
    pub encoder: &'a Encoder,
    pub gaussian: &'a PooledGaussian,
}

impl Scorer for MdScorer<'_> {
    fn kind(&self) -> ScorerKind {
        ScorerKind::Md
    }

    fn score_graph(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encoder.check_input(tape.value(x))?;
        let ev = self.encoder.register(tape, false)?;
        let z = self.encoder.forward(tape, &ev, x)?;
        let b = tape.shape(z)[0];
        let white = tape.constant(self.gaussian.whitening());
        let mut neg_q = Vec::with_capacity(self.gaussian.means.len());
        for m in &self.gaussian.means {
            let shift = tape.constant(Tensor::vector(m.iter().map(|v| -v).collect()));
            let diff = tape.add_row(z, shift)?;
            let y = tape.matmul(diff, white)?;
            let sq = tape.mul(y, y)?;
            let q = tape.sum_last(sq)?;
            let q = tape.neg(q);
            neg_q.push(tape.reshape(q, &[b, 1])?);
        }
        let stacked = tape.concat_cols(&neg_q)?;
        let best = tape.row_max(stacked)?;
        Ok(tape.neg(best))
    }

    fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let z = self.encoder.encode_values(x)?;
        Ok((0..z.rows())
            .map(|i| self.gaussian.min_mahalanobis_sq(z.row(i)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adgraph::{Activation, Layer, MlpParams};

    fn identity_encoder(d: usize) -> Encoder {
        Encoder {
            conv: None,
            mlp: MlpParams::from_layers(
                "encoder",
                vec![Layer {
                    weight: Tensor::eye(d),
                    bias: Tensor::zeros(&[d]),
                }],
                Activation::Identity,
                false,
            )
            .unwrap(),
        }
    }

    #[test]
    fn msp_examples() {
        let c = Classifier {
            encoder: identity_encoder(2),
            head: Layer {
                weight: Tensor::eye(2),
                bias: Tensor::zeros(&[2]),
            },
        };
        let s = MspScorer { classifier: &c }
            .scores(&Tensor::from_rows(&[&[0.0, 0.0], &[10.0, -10.0]]))
            .unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!(s[1] > 0.0 && s[1] < 3e-9);
    }

    #[test]
    fn md_examples() {
        let enc = identity_encoder(2);
        let g = PooledGaussian::from_parts(vec![vec![0.0, 0.0]], Tensor::eye(2)).unwrap();
        let md = MdScorer {
            encoder: &enc,
            gaussian: &g,
        };
        let x = Tensor::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]]);
        assert_eq!(md.scores(&x).unwrap(), vec![25.0, 0.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let s = md.score_graph(&mut tape, xv).unwrap();
        assert_eq!(tape.value(s).data(), &[25.0, 0.0]);
    }

    #[test]
    fn md_covariance_scaling() {
        let enc = identity_encoder(2);
        let means = vec![vec![0.0, 1.0], vec![2.0, -1.0]];
        let cov = Tensor::from_rows(&[&[2.0, 0.3], &[0.3, 1.0]]);
        let g1 = PooledGaussian::from_parts(means.clone(), cov.clone()).unwrap();
        let g4 = PooledGaussian::from_parts(means, cov.map(|v| 4.0 * v)).unwrap();
        let x = Tensor::from_rows(&[&[0.5, 0.5], &[3.0, -2.0], &[-1.0, 4.0]]);
        let a = MdScorer {
            encoder: &enc,
            gaussian: &g1,
        }
        .scores(&x)
        .unwrap();
        let b = MdScorer {
            encoder: &enc,
            gaussian: &g4,
        }
        .scores(&x)
        .unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u / 4.0 - v).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_fit_uses_within_class_scatter() {
        let z = Tensor::from_rows(&[&[0.0, 0.0], &[2.0, 0.0], &[10.0, 10.0], &[10.0, 12.0]]);
        let g = PooledGaussian::fit(&z, &[0, 0, 1, 1], 2, 0.0).unwrap();
        // scatter: class 0 gives [[2,0],[0,0]], class 1 gives [[0,0],[0,2]]; N − K = 2
        assert_eq!(g.covariance.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(g.means, vec![vec![1.0, 0.0], vec![10.0, 11.0]]);
    }
}
