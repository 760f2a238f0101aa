//! PGD on the OOD score with random restarts.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scorers::Scorer;
use crate::adgraph::Tape;
use crate::error::{ArosError, Result};
use crate::seed::stream;
use crate::tensor::Tensor;

/// Samples attacked together on one tape.
const CHUNK: usize = 32;
/// Relative slack for floating-point round-off in the feasibility check.
const BALL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackNorm {
    Linf,
    L2,
}

impl std::fmt::Display for AttackNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackNorm::Linf => "linf",
            AttackNorm::L2 => "l2",
        })
    }
}

impl std::str::FromStr for AttackNorm {
    type Err = ArosError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(AttackNorm::Linf),
            "l2" => Ok(AttackNorm::L2),
            other => Err(ArosError::config("norm", format!("expected linf or l2, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5 · ε / steps`.
    pub alpha: Option<f64>,
    pub restarts: usize,
    pub norm: AttackNorm,
    /// Clamp to `[0, 1]` (image inputs).
    pub clamp: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            steps: 200,
            alpha: None,
            restarts: 10,
            norm: AttackNorm::Linf,
            clamp: false,
        }
    }
}

impl AttackConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(ArosError::contract(format!(
                "attack epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        if self.restarts == 0 || self.steps == 0 {
            return Err(ArosError::contract("attack needs restarts >= 1 and steps >= 1"));
        }
        if self.epsilon > 0.0 && !(self.alpha() > 0.0) {
            return Err(ArosError::contract("attack step size must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub x_adv: Tensor,
    pub scores: Vec<f64>,
}

fn project(cur: &mut [f64], x0: &[f64], cfg: &AttackConfig) {
    let eps = cfg.epsilon;
    match cfg.norm {
        AttackNorm::Linf => {
            for (c, &o) in cur.iter_mut().zip(x0) {
                *c = o + (*c - o).clamp(-eps, eps);
            }
        }
        AttackNorm::L2 => {
            let n = cur.iter().zip(x0).map(|(c, o)| (c - o) * (c - o)).sum::<f64>().sqrt();
            if n > eps {
                let s = eps / n;
                for (c, &o) in cur.iter_mut().zip(x0) {
                    *c = o + (*c - o) * s;
                }
            }
        }
    }
    if cfg.clamp {
        cur.iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
    }
}

fn distance(a: &[f64], b: &[f64], norm: AttackNorm) -> f64 {
    match norm {
        AttackNorm::Linf => a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())),
        AttackNorm::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

fn random_start(x0: &[f64], cfg: &AttackConfig, rng: &mut impl Rng) -> Vec<f64> {
    let eps = cfg.epsilon;
    let mut out: Vec<f64> = match cfg.norm {
        AttackNorm::Linf => x0
            .iter()
            .map(|&o| o + if eps > 0.0 { rng.gen_range(-eps..eps) } else { 0.0 })
            .collect(),
        AttackNorm::L2 => {
            let u: Vec<f64> = x0.iter().map(|_| rng.sample(StandardNormal)).collect();
            let un = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let r = eps * rng.gen::<f64>().powf(1.0 / x0.len() as f64);
            x0.iter().zip(&u).map(|(o, v)| o + r * v / un).collect()
        }
    };
    project(&mut out, x0, cfg);
    out
}

/// Attacks rows `offset..offset + b` (already sliced into `x`), all restarts
/// stacked on one tape. Returns the best point per sample and its score.
fn attack_chunk(
    scorer: &dyn Scorer,
    x: &Tensor,
    signs: &[f64],
    cfg: &AttackConfig,
    offset: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = x.rows();
    let w = x.row_len();
    let r = cfg.restarts;
    let alpha = cfg.alpha();
    // Row k·b + i is restart k of sample i.
    let mut cur = Vec::with_capacity(r * b * w);
    let mut rngs: Vec<_> = (0..b)
        .map(|i| stream(seed, "redteam.restart", (offset + i) as u64))
        .collect();
    for _ in 0..r {
        for (i, rng) in rngs.iter_mut().enumerate() {
            cur.extend(random_start(x.row(i), cfg, rng));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = r * b;

    // The unperturbed input is always a candidate.
    let clean = scorer.scores(x)?;
    let mut best_x: Vec<f64> = x.data().to_vec();
    let mut best_obj: Vec<f64> = clean.iter().zip(signs).map(|(s, g)| s * g).collect();

    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(shape.clone(), cur.clone())?);
        let s = scorer.score_graph(&mut tape, xv).map_err(|e| ArosError::Attack {
            restart: 0,
            source: Box::new(e),
        })?;
        let scores = tape.value(s).data().to_vec();
        for (row, &sv) in scores.iter().enumerate() {
            let i = row % b;
            let obj = sv * signs[i];
            if obj > best_obj[i] {
                best_obj[i] = obj;
                best_x[i * w..(i + 1) * w].copy_from_slice(&cur[row * w..(row + 1) * w]);
            }
        }
        if step == cfg.steps || cfg.epsilon == 0.0 {
            break;
        }
        let weights: Vec<f64> = (0..r * b).map(|row| signs[row % b]).collect();
        let wv = tape.constant(Tensor::vector(weights));
        let obj = tape.mul(s, wv)?;
        let total = tape.sum(obj);
        let grads = tape.backward(total).map_err(|e| ArosError::Attack {
            restart: 0,
            source: Box::new(e),
        })?;
        let g = grads.wrt(&tape, xv);
        for row in 0..r * b {
            let gi = &g.data()[row * w..(row + 1) * w];
            let ci = &mut cur[row * w..(row + 1) * w];
            match cfg.norm {
                AttackNorm::Linf => {
                    for (c, &gv) in ci.iter_mut().zip(gi) {
                        *c += alpha
                            * if gv > 0.0 {
                                1.0
                            } else if gv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                    }
                }
                AttackNorm::L2 => {
                    let n = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        for (c, &gv) in ci.iter_mut().zip(gi) {
                            *c += alpha * gv / n;
                        }
                    }
                }
            }
            project(ci, x.row(row % b), cfg);
        }
    }
    let scores = best_obj.iter().zip(signs).map(|(o, g)| o * g).collect();
    Ok((best_x, scores))
}

/// `x ← Π(x + α·sign(I(y)·∇S))` from `restarts` random starts; keeps, per
/// sample, the point with the best objective `I(y)·S` seen anywhere
/// (the clean input included). `I(y) = +1` for ID rows, −1 for OOD rows.
pub fn pgd_on_score(
    scorer: &dyn Scorer,
    x: &Tensor,
    is_id: &[bool],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let n = x.rows();
    if is_id.len() != n {
        return Err(ArosError::contract(format!("{} flags for {n} inputs", is_id.len())));
    }
    if !x.all_finite() {
        return Err(ArosError::contract("attack inputs must be finite"));
    }
    let w = x.row_len();
    let signs: Vec<f64> = is_id.iter().map(|&id| if id { 1.0 } else { -1.0 }).collect();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<(Vec<f64>, Vec<f64>)> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + CHUNK).min(n);
            let idx: Vec<usize> = (s..e).collect();
            attack_chunk(scorer, &x.gather_rows(&idx), &signs[s..e], cfg, s, seed)
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(n * w);
    let mut scores = Vec::with_capacity(n);
    for (xs, ss) in parts {
        data.extend(xs);
        scores.extend(ss);
    }
    let x_adv = Tensor::new(x.shape().to_vec(), data)?;
    let tol = cfg.epsilon * (1.0 + BALL_SLACK) + BALL_SLACK;
    for i in 0..n {
        let dist = distance(x_adv.row(i), x.row(i), cfg.norm);
        if dist > tol {
            return Err(ArosError::contract(format!(
                "attack left the {} ball at row {i}: {dist} > {}",
                cfg.norm, cfg.epsilon
            )));
        }
        if cfg.clamp && x_adv.row(i).iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ArosError::contract(format!("attack left [0, 1] at row {i}")));
        }
    }
    Ok(AttackOutcome { x_adv, scores })
}
