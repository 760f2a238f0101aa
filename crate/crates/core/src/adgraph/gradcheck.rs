//! Central finite-difference checks of reverse-mode gradients.

use super::tape::{Tape, Var};
use crate::error::{ArosError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |a − n| / max(|a|, |n|, floor)` over every checked entry.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the worst relative error.
    pub worst: (usize, usize),
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares the tape gradient of a scalar loss with central differences.
///
/// `build` records the loss for the given input values and returns it with
/// the nodes holding each input; it is re-run on perturbed copies, so it
/// must be deterministic. `floor` keeps the relative error meaningful for
/// gradients near zero.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, floor: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)>,
{
    if !(step > 0.0) || !(floor > 0.0) {
        return Err(ArosError::contract("gradient check needs step > 0 and floor > 0"));
    }
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, inputs)?;
    if vars.len() != inputs.len() {
        return Err(ArosError::contract(format!(
            "gradient check: {} nodes returned for {} inputs",
            vars.len(),
            inputs.len()
        )));
    }
    let grads = tape.backward(loss)?;
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = build(&mut t, values)?;
        Ok(t.value(l).item())
    };

    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        entries: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            if !rel.is_finite() {
                return Err(ArosError::Numeric(format!(
                    "non-finite gradient check at input {k}, entry {i}"
                )));
            }
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = (k, i);
            }
            out.max_abs_error = out.max_abs_error.max(abs);
            out.entries += 1;
        }
    }
    Ok(out)
}

/// [`check_gradients`] for losses built directly from leaf inputs.
pub fn check_leaf_gradients<F>(inputs: &[Tensor], step: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients(inputs, step, floor, |tape, values| {
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = f(tape, &vars)?;
        Ok((loss, vars))
    })
}
