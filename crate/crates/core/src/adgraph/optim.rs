//! Plain SGD and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{ArosError, Result};
use crate::tensor::Tensor;

/// Anything holding named trainable tensors.
pub trait Parameters {
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor));
}

pub type ParamStore = BTreeMap<String, Tensor>;

impl Parameters for ParamStore {
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (k, v) in self.iter_mut() {
            f(k.clone(), v);
        }
    }
}

/// `lr0 · ½ · (1 + cos(π · epoch / total_epochs))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(ArosError::contract("cosine_lr: total_epochs must be positive"));
    }
    if epoch > total_epochs || lr0 <= 0.0 {
        return Err(ArosError::contract(format!(
            "cosine_lr: epoch {epoch} of {total_epochs}, lr0 {lr0}"
        )));
    }
    let frac = epoch as f64 / total_epochs as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// `p ← p − lr·g` for every parameter; every parameter needs a gradient.
pub fn sgd_step<P: Parameters + ?Sized>(params: &mut P, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    let mut failure = None;
    params.for_each_param_mut(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        match grads.get(&name) {
            None => failure = Some(ArosError::contract(format!("no gradient for `{name}`"))),
            Some(g) if g.shape() != p.shape() => {
                failure = Some(ArosError::Shape {
                    op: "sgd_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                })
            }
            Some(g) => {
                for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *v -= lr * d;
                }
            }
        }
    });
    failure.map_or(Ok(()), Err)
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before rescaling.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(ArosError::contract(format!("clip_grad_norm: max_norm {max_norm}")));
    }
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(ArosError::Numeric(format!("gradient norm {norm}")));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.05).unwrap(), 0.05);
        assert!(cosine_lr(10, 10, 0.05).unwrap().abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.05).unwrap() - 0.025).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.05).is_err());
    }

    fn store(p: f64) -> ParamStore {
        BTreeMap::from([("p".to_string(), Tensor::scalar(p))])
    }

    #[test]
    fn single_step() {
        let mut s = store(1.0);
        sgd_step(&mut s, &store(2.0), 0.5).unwrap();
        assert_eq!(s["p"].item(), 0.0);
        sgd_step(&mut s, &store(2.0), 0.0).unwrap();
        assert_eq!(s["p"].item(), 0.0);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // loss (p − 3)², gradient 2(p − 3)
        let mut s = store(0.0);
        let mut trail = vec![0.0];
        for _ in 0..2 {
            let g = store(2.0 * (s["p"].item() - 3.0));
            sgd_step(&mut s, &g, 0.25).unwrap();
            trail.push(s["p"].item());
        }
        assert_eq!(trail, vec![0.0, 1.5, 2.25]);
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::scalar(3.0)),
            ("b".to_string(), Tensor::scalar(4.0)),
        ]);
        assert_eq!(clip_grad_norm(&mut g, 10.0).unwrap(), 5.0);
        assert_eq!(g["a"].item(), 3.0);
        clip_grad_norm(&mut g, 1.0).unwrap();
        assert!((g["a"].item() - 0.6).abs() < 1e-15 && (g["b"].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = store(1.0);
        let err = sgd_step(&mut s, &BTreeMap::new(), 0.1).unwrap_err();
        assert!(matches!(err, ArosError::Contract(_)));
    }
}
