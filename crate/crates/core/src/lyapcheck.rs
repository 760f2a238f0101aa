//! Runtime stability certificates for trained dynamics: diagonal dominance of
//! the Jacobian, the Bendixson and Gershgorin bounds, and contraction probes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ArosError, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::seed::stream;
use crate::stabnet::NodeDynamics;
use crate::tensor::Tensor;

const JACOBI_SWEEPS: usize = 100;
/// Round-off allowance when comparing a contraction ratio with 1.
pub const RATIO_SLACK: f64 = 1e-9;

/// Input Jacobian of the vector field at `z`.
pub fn jacobian_at(dynamics: &NodeDynamics, z: &[f64]) -> Result<Tensor> {
    dynamics.net.jacobian_values(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dominance {
    Strict,
    NonStrict,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceVerdict {
    /// Per row: `|a_ii|` compared with the off-diagonal absolute row sum, and `a_ii ≤ 0`.
    pub rows_pass: Vec<bool>,
    pub pass: bool,
    /// Every diagonal entry strictly negative.
    pub negative_diagonal: bool,
}

fn square(a: &Tensor, op: &'static str) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(ArosError::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Row diagonal dominance with a non-positive diagonal, strict (`>`) or not (`≥`).
pub fn diag_dominance(a: &Tensor, strict: bool) -> Result<DominanceVerdict> {
    let n = square(a, "diag_dominance")?;
    let mut rows_pass = Vec::with_capacity(n);
    let mut negative_diagonal = true;
    for i in 0..n {
        let aii = a.at(i, i);
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| a.at(i, j).abs()).sum();
        let dominant = if strict { aii.abs() > off } else { aii.abs() >= off };
        rows_pass.push(dominant && aii <= 0.0);
        negative_diagonal &= aii < 0.0;
    }
    Ok(DominanceVerdict {
        pass: rows_pass.iter().all(|&p| p),
        rows_pass,
        negative_diagonal,
    })
}

/// Strongest verdict `a` satisfies.
pub fn classify_dominance(a: &Tensor) -> Result<Dominance> {
    Ok(if diag_dominance(a, true)?.pass {
        Dominance::Strict
    } else if diag_dominance(a, false)?.pass {
        Dominance::NonStrict
    } else {
        Dominance::Fail
    })
}

/// `λ_max((A + Aᵀ)/2)`, an upper bound on the real part of every eigenvalue of `A`.
pub fn max_real_part_bound(a: &Tensor) -> Result<f64> {
    let n = square(a, "max_real_part_bound")?;
    if n == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut s = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, 0.5 * (a.at(i, j) + a.at(j, i)));
        }
    }
    let ev = symmetric_eigenvalues(&s, JACOBI_SWEEPS)?;
    Ok(*ev.last().expect("n > 0"))
}

/// `max_i (a_ii + Σ_{j≠i} |a_ij|)`: every eigenvalue's real part lies at or below it.
pub fn gershgorin_bound(a: &Tensor) -> Result<f64> {
    let n = square(a, "gershgorin_bound")?;
    Ok((0..n)
        .map(|i| a.at(i, i) + (0..n).filter(|&j| j != i).map(|j| a.at(i, j).abs()).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub jacobian: Tensor,
    pub dominance: Dominance,
    pub negative_diagonal: bool,
    pub bendixson_bound: f64,
    pub gershgorin_bound: f64,
    /// `||z'(T) − z(T)|| / δ` per probe direction; empty when integration diverged.
    pub ratios: Vec<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub delta_norm: f64,
    pub n_dirs: usize,
    pub seed: u64,
    pub points: Vec<PointReport>,
    /// Points whose Jacobian is strictly dominant with a negative diagonal.
    pub frac_strict_negative: f64,
    pub frac_bendixson_negative: f64,
    pub frac_gershgorin_negative: f64,
    /// Probes with ratio ≤ 1 up to round-off (diverged points count as failures).
    pub frac_contracting: f64,
    pub mean_ratio: Option<f64>,
    pub diverged_points: usize,
}

/// Jacobian certificates and contraction ratios at every row of `points`.
pub fn stability_probe(
    dynamics: &NodeDynamics,
    points: &Tensor,
    delta_norm: f64,
    n_dirs: usize,
    seed: u64,
) -> Result<StabilityReport> {
    if !(delta_norm > 0.0) || n_dirs == 0 {
        return Err(ArosError::contract(
            "stability_probe needs delta_norm > 0 and n_dirs >= 1",
        ));
    }
    let (n, d) = points.dims2()?;
    if d != dynamics.dim() {
        return Err(ArosError::Shape {
            op: "stability_probe",
            lhs: points.shape().to_vec(),
            rhs: vec![dynamics.dim()],
        });
    }
    let mut reports = Vec::with_capacity(n);
    for i in 0..n {
        let z = points.row(i);
        let jacobian = jacobian_at(dynamics, z)?;
        let dom = diag_dominance(&jacobian, true)?;
        let dominance = classify_dominance(&jacobian)?;
        let bendixson = max_real_part_bound(&jacobian)?;
        let gersh = gershgorin_bound(&jacobian)?;

        let mut rng = stream(seed, "lyapcheck.probe", i as u64);
        let mut batch = Vec::with_capacity((n_dirs + 1) * d);
        batch.extend_from_slice(z);
        for _ in 0..n_dirs {
            let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            batch.extend(z.iter().zip(&u).map(|(a, b)| a + delta_norm * b / norm));
        }
        let states = Tensor::matrix(n_dirs + 1, d, batch)?;
        let (ratios, diverged) = match dynamics.integrate_values(&states, false) {
            Ok(mut out) => {
                let zt = out.pop().expect("final state");
                let base = zt.row(0).to_vec();
                let ratios = (1..=n_dirs)
                    .map(|k| {
                        zt.row(k)
                            .iter()
                            .zip(&base)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                            / delta_norm
                    })
                    .collect();
                (ratios, false)
            }
            Err(ArosError::Divergence { .. }) => (Vec::new(), true),
            Err(e) => return Err(e),
        };
        reports.push(PointReport {
            jacobian,
            dominance,
            negative_diagonal: dom.negative_diagonal,
            bendixson_bound: bendixson,
            gershgorin_bound: gersh,
            ratios,
            diverged,
        });
    }
    let frac = |f: &dyn Fn(&PointReport) -> bool| {
        if n == 0 {
            0.0
        } else {
            reports.iter().filter(|r| f(r)).count() as f64 / n as f64
        }
    };
    let frac_strict_negative = frac(&|r| r.dominance == Dominance::Strict && r.negative_diagonal);
    let frac_bendixson_negative = frac(&|r| r.bendixson_bound < 0.0);
    let frac_gershgorin_negative = frac(&|r| r.gershgorin_bound < 0.0);
    let total_probes = (n * n_dirs) as f64;
    let all_ratios: Vec<f64> = reports.iter().flat_map(|r| r.ratios.iter().copied()).collect();
    let contracting = all_ratios.iter().filter(|&&r| r <= 1.0 + RATIO_SLACK).count() as f64;
    let diverged_points = reports.iter().filter(|r| r.diverged).count();
    Ok(StabilityReport {
        delta_norm,
        n_dirs,
        seed,
        points: reports,
        frac_strict_negative,
        frac_bendixson_negative,
        frac_gershgorin_negative,
        frac_contracting: if total_probes > 0.0 {
            contracting / total_probes
        } else {
            0.0
        },
        mean_ratio: (!all_ratios.is_empty()).then(|| all_ratios.iter().sum::<f64>() / all_ratios.len() as f64),
        diverged_points,
    })
}
