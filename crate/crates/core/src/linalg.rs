//! Small dense kernels: Cholesky factorization and the cyclic Jacobi
//! eigenvalue sweep for symmetric matrices.

use crate::error::{ArosError, Result};
use crate::tensor::Tensor;

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

/// Lower-triangular `L` with `L·Lᵀ = A`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = square(a, "cholesky")?;
    let ad = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = ad[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(ArosError::Numeric(format!(
                "Cholesky failed at pivot {j} (value {d:e})"
            )));
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = ad[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Tensor::matrix(n, n, l)
}

/// Solves `L·x = b` by forward substitution.
pub fn solve_lower(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let ld = l.data();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= ld[i * n + k] * x[k];
        }
        x[i] = s / ld[i * n + i];
    }
    x
}

/// Solves `Lᵀ·x = b` by back substitution.
pub fn solve_upper_t(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let ld = l.data();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= ld[k * n + i] * x[k];
        }
        x[i] = s / ld[i * n + i];
    }
    x
}

/// `log det A` from its Cholesky factor.
pub fn logdet_from_cholesky(l: &Tensor) -> f64 {
    let n = l.shape()[0];
    2.0 * (0..n).map(|i| l.data()[i * n + i].ln()).sum::<f64>()
}

/// `A⁻¹` for symmetric positive definite `A`, via its Cholesky factor.
pub fn spd_inverse(l: &Tensor) -> Tensor {
    let n = l.shape()[0];
    let mut inv = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = solve_upper_t(l, &solve_lower(l, &e));
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
    }
    inv
}

/// Eigenvalues (ascending) of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Tensor, max_sweeps: usize) -> Result<Vec<f64>> {
    let n = square(a, "symmetric_eigenvalues")?;
    let mut m = a.data().to_vec();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut converged = off(&m) <= 1e-14 * scale;
    let mut sweeps = 0;
    while !converged {
        if sweeps == max_sweeps {
            return Err(ArosError::Numeric(format!(
                "Jacobi eigenvalue sweep did not converge in {max_sweeps} sweeps"
            )));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
        sweeps += 1;
        converged = off(&m) <= 1e-14 * scale;
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = Tensor::from_rows(&[&[4.0, 2.0, 0.4], &[2.0, 5.0, 1.0], &[0.4, 1.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        let back = l.matmul(&l.transpose().unwrap()).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let inv = spd_inverse(&l);
        let id = a.matmul(&inv).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((id.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(matches!(cholesky(&a), Err(ArosError::Numeric(_))));
    }

    #[test]
    fn jacobi_two_by_two() {
        let a = Tensor::from_rows(&[&[-3.0, 0.75], &[0.75, -2.0]]);
        let ev = symmetric_eigenvalues(&a, 100).unwrap();
        let want_max = -2.5 + 0.8125f64.sqrt();
        assert!((ev[1] - want_max).abs() < 1e-12);
        assert!((ev[0] - (-2.5 - 0.8125f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn jacobi_zero_sweep_budget_fails_on_nondiagonal() {
        let a = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(symmetric_eigenvalues(&a, 0).is_err());
        assert_eq!(symmetric_eigenvalues(&Tensor::zeros(&[3, 3]), 0).unwrap(), vec![0.0; 3]);
    }
}
