//! Multilayer perceptrons and their analytic input Jacobians.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::Parameters;
use super::tape::{Tape, Var};
use crate::error::{ArosError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `(out, in)`
    pub weight: Tensor,
    /// `(out)`
    pub bias: Tensor,
}

/// Fully connected network `x ↦ W_L σ(… σ(W_1 x + b_1) …) + b_L`.
///
/// The activation is applied after every hidden layer and, when
/// `activate_output` is set, after the last one as well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub name: String,
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub activate_output: bool,
}

impl MlpParams {
    /// Glorot-uniform weights scaled by `gain`, zero biases.
    pub fn init(
        name: impl Into<String>,
        dims: &[usize],
        activation: Activation,
        activate_output: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ArosError::contract(format!("invalid MLP dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
                Layer {
                    weight: Tensor::matrix(fan_out, fan_in, data).expect("sized"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        let p = Self {
            name: name.into(),
            layers,
            activation,
            activate_output,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_layers(
        name: impl Into<String>,
        layers: Vec<Layer>,
        activation: Activation,
        activate_output: bool,
    ) -> Result<Self> {
        let p = Self {
            name: name.into(),
            layers,
            activation,
            activate_output,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(ArosError::contract("MLP without layers"));
        }
        let mut width = None;
        for l in &self.layers {
            let (out, inp) = l.weight.dims2()?;
            if l.bias.shape() != [out] {
                return Err(ArosError::Shape {
                    op: "mlp bias",
                    lhs: l.weight.shape().to_vec(),
                    rhs: l.bias.shape().to_vec(),
                });
            }
            if let Some(w) = width {
                if w != inp {
                    return Err(ArosError::Shape {
                        op: "mlp layers",
                        lhs: vec![w],
                        rhs: l.weight.shape().to_vec(),
                    });
                }
            }
            width = Some(out);
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("validated").weight.shape()[0]
    }

    fn activated(&self, k: usize) -> bool {
        k + 1 < self.layers.len() || self.activate_output
    }

    /// Forward pass on plain tensors, `x: (B, in) → (B, out)`.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (k, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight.transpose()?)?;
            let n = l.bias.len();
            let act = self.activated(k).then_some(self.activation);
            for row in h.data_mut().chunks_mut(n) {
                for (v, b) in row.iter_mut().zip(l.bias.data()) {
                    *v += b;
                    if let Some(a) = act {
                        *v = a.apply(*v);
                    }
                }
            }
        }
        Ok(h)
    }

    fn require_smooth(&self) -> Result<()> {
        if self.activation == Activation::Relu {
            return Err(ArosError::contract(
                "dynamics Jacobians need a smooth activation; relu is not differentiable at 0",
            ));
        }
        if self.activate_output {
            return Err(ArosError::contract("dynamics networks must have a linear output layer"));
        }
        Ok(())
    }

    /// Input Jacobian `∂h/∂z` at a single point, on plain tensors.
    pub fn jacobian_values(&self, z: &[f64]) -> Result<Tensor> {
        self.require_smooth()?;
        if z.len() != self.input_dim() {
            return Err(ArosError::Shape {
                op: "jacobian",
                lhs: vec![z.len()],
                rhs: vec![self.input_dim()],
            });
        }
        let mut h = z.to_vec();
        let mut jac = Tensor::eye(z.len());
        for (k, l) in self.layers.iter().enumerate() {
            let (out, inp) = l.weight.dims2()?;
            let w = l.weight.data();
            let mut pre = l.bias.data().to_vec();
            for i in 0..out {
                for j in 0..inp {
                    pre[i] += w[i * inp + j] * h[j];
                }
            }
            jac = l.weight.matmul(&jac)?;
            if self.activated(k) {
                for (i, p) in pre.iter().enumerate() {
                    let s = self.activation.derivative(*p);
                    jac.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                h = pre.iter().map(|&p| self.activation.apply(p)).collect();
            } else {
                h = pre;
            }
        }
        Ok(jac)
    }

    /// Registers every weight and bias on `tape` as named trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> Result<MlpVars> {
        self.register_with(tape, true)
    }

    /// Registers the network as constants (e.g. a frozen encoder).
    pub fn register_frozen(&self, tape: &mut Tape) -> Result<MlpVars> {
        self.register_with(tape, false)
    }

    fn register_with(&self, tape: &mut Tape, trainable: bool) -> Result<MlpVars> {
        let mut weights = Vec::new();
        let mut weights_t = Vec::new();
        let mut biases = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            let (w, b) = if trainable {
                (
                    tape.param(format!("{}.w{k}", self.name), l.weight.clone()),
                    tape.param(format!("{}.b{k}", self.name), l.bias.clone()),
                )
            } else {
                (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
            };
            weights_t.push(tape.transpose(w)?);
            weights.push(w);
            biases.push(b);
        }
        Ok(MlpVars {
            weights,
            weights_t,
            biases,
            activation: self.activation,
            activate_output: self.activate_output,
        })
    }
}

impl Parameters for MlpParams {
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            f(format!("{}.w{k}", self.name), &mut l.weight);
            f(format!("{}.b{k}", self.name), &mut l.bias);
        }
    }
}

/// Tape handles for an [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    weights_t: Vec<Var>,
    pub biases: Vec<Var>,
    activation: Activation,
    activate_output: bool,
}

impl MlpVars {
    fn activate(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self.activation {
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
            Activation::Relu => {
                // relu(x) = (x + |x|) / 2
                let a = tape.abs(x);
                let s = tape.add(x, a)?;
                tape.scale(s, 0.5)
            }
        })
    }

    fn activated(&self, k: usize) -> bool {
        k + 1 < self.weights.len() || self.activate_output
    }

    /// `x: (B, in) → (B, out)`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for k in 0..self.weights.len() {
            let lin = tape.matmul(h, self.weights_t[k])?;
            h = tape.add_row(lin, self.biases[k])?;
            if self.activated(k) {
                h = self.activate(tape, h)?;
            }
        }
        Ok(h)
    }

    fn require_smooth(&self) -> Result<()> {
        if self.activate_output || self.activation == Activation::Relu {
            return Err(ArosError::contract(
                "dynamics Jacobians need a smooth activation and a linear output layer",
            ));
        }
        Ok(())
    }

    /// Hidden pre-activations and activation derivatives for `z: (B, in)`.
    fn hidden_slopes(&self, tape: &mut Tape, z: Var) -> Result<Vec<Var>> {
        let mut slopes = Vec::new();
        let mut h = z;
        for k in 0..self.weights.len() - 1 {
            let lin = tape.matmul(h, self.weights_t[k])?;
            let pre = tape.add_row(lin, self.biases[k])?;
            let (act, slope) = match self.activation {
                Activation::Tanh => {
                    let a = tape.tanh(pre);
                    let sq = tape.mul(a, a)?;
                    let neg = tape.neg(sq);
                    (a, tape.add_scalar(neg, 1.0))
                }
                Activation::Identity => {
                    let ones = tape.constant(Tensor::filled(tape.shape(pre), 1.0));
                    (pre, ones)
                }
                Activation::Relu => unreachable!("rejected by require_smooth"),
            };
            slopes.push(slope);
            h = act;
        }
        Ok(slopes)
    }

    /// `J = W_L · D_{L-1} · W_{L-1} ⋯ D_1 · W_1` at a single point `z: (in)`,
    /// built from `diag` and `matmul` nodes.
    pub fn jacobian(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.require_smooth()?;
        let n = tape.value(z).len();
        let z_row = tape.reshape(z, &[1, n])?;
        let slopes = self.hidden_slopes(tape, z_row)?;
        let mut jac = self.weights[0];
        for (k, s) in slopes.into_iter().enumerate() {
            let width = tape.value(s).len();
            let s_vec = tape.reshape(s, &[width])?;
            let d = tape.diag(s_vec)?;
            let scaled = tape.matmul(d, jac)?;
            jac = tape.matmul(self.weights[k + 1], scaled)?;
        }
        Ok(jac)
    }

    /// Batched Jacobians `(B, out, in)` for `z: (B, in)`.
    pub fn jacobian_batch(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.require_smooth()?;
        let b = tape.shape(z)[0];
        let slopes = self.hidden_slopes(tape, z)?;
        if slopes.is_empty() {
            // Single affine layer: the Jacobian is W for every sample.
            let w = tape.value(self.weights[0]).shape().to_vec();
            let ones = tape.constant(Tensor::filled(&[b, w[0]], 1.0));
            return tape.batch_row_scale(self.weights[0], ones);
        }
        let mut jac = self.weights[0];
        for (k, s) in slopes.into_iter().enumerate() {
            let scaled = tape.batch_row_scale(jac, s)?;
            jac = tape.batch_left_matmul(self.weights[k + 1], scaled)?;
        }
        Ok(jac)
    }
}
