//! The detector: an autonomous neural ODE on embedding space integrated by
//! fixed-step RK4, an orthonormal two-class head, the stability-regularized
//! loss and its training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adgraph::{clip_grad_norm, cosine_lr, sgd_step, Activation, MlpParams, MlpVars, Parameters, Tape, Var};
use crate::error::{ArosError, Result};
use crate::oodforge::EmbeddingSet;
use crate::pretrain::Encoder;
use crate::seed::{derive_seed, rng_from};
use crate::tensor::Tensor;

const DEGENERATE_NORM: f64 = 1e-12;
/// Tolerance on `||WᵀW − I||_∞` checked after every optimizer step.
pub const ORTHO_TOL: f64 = 1e-8;

/// Time-invariant vector field `h_φ: ℝ^d → ℝ^d` with its integration grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDynamics {
    pub net: MlpParams,
    pub horizon: f64,
    pub steps: usize,
}

impl NodeDynamics {
    pub fn init(dim: usize, hidden: usize, gain: f64, horizon: f64, steps: usize, seed: u64) -> Result<Self> {
        let net = MlpParams::init(
            "dynamics",
            &[dim, hidden, dim],
            Activation::Tanh,
            false,
            gain,
            &mut rng_from(seed),
        )?;
        let d = Self { net, horizon, steps };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.input_dim() != self.net.output_dim() {
            return Err(ArosError::contract(format!(
                "dynamics must map ℝ^d to itself, got {} → {}",
                self.net.input_dim(),
                self.net.output_dim()
            )));
        }
        if self.net.activation == Activation::Relu || self.net.activate_output {
            return Err(ArosError::contract(
                "dynamics need a smooth activation and a linear output layer",
            ));
        }
        if self.steps == 0 || !(self.horizon > 0.0) {
            return Err(ArosError::contract("integration needs steps >= 1 and horizon > 0"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Integrates `z0: (B, d)` on plain tensors; returns every grid state when
    /// `keep_trajectory` is set, else only the final one.
    pub fn integrate_values(&self, z0: &Tensor, keep_trajectory: bool) -> Result<Vec<Tensor>> {
        check_state(z0, self.dim())?;
        let h = self.step_size();
        let mut z = z0.clone();
        let mut traj = vec![];
        if keep_trajectory {
            traj.push(z.clone());
        }
        for step in 0..self.steps {
            let k1 = self.net.forward_values(&z)?;
            let k2 = self.net.forward_values(&axpy(&z, 0.5 * h, &k1))?;
            let k3 = self.net.forward_values(&axpy(&z, 0.5 * h, &k2))?;
            let k4 = self.net.forward_values(&axpy(&z, h, &k3))?;
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v += h / 6.0 * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i]);
            }
            if !z.all_finite() {
                return Err(ArosError::Divergence { step });
            }
            if keep_trajectory {
                traj.push(z.clone());
            }
        }
        if !keep_trajectory {
            traj.push(z);
        }
        Ok(traj)
    }
}

impl Parameters for NodeDynamics {
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.net.for_each_param_mut(f);
    }
}

fn check_state(z: &Tensor, d: usize) -> Result<()> {
    match z.shape() {
        [_, c] if *c == d => Ok(()),
        s => Err(ArosError::Shape {
            op: "rk4_integrate",
            lhs: s.to_vec(),
            rhs: vec![d],
        }),
    }
}

fn axpy(z: &Tensor, a: f64, k: &Tensor) -> Tensor {
    z.zip_map(k, |x, y| x + a * y).expect("same shape")
}

/// Classic RK4 recorded on `tape`, `S` steps of size `T/S` from `z0: (B, d)`.
pub fn rk4_integrate(tape: &mut Tape, vars: &MlpVars, dynamics: &NodeDynamics, z0: Var) -> Result<Var> {
    check_state(tape.value(z0), dynamics.dim())?;
    let h = dynamics.step_size();
    let mut z = z0;
    for step in 0..dynamics.steps {
        let k1 = vars.forward(tape, z)?;
        let s = tape.scale(k1, 0.5 * h);
        let z2 = tape.add(z, s)?;
        let k2 = vars.forward(tape, z2)?;
        let s = tape.scale(k2, 0.5 * h);
        let z3 = tape.add(z, s)?;
        let k3 = vars.forward(tape, z3)?;
        let s = tape.scale(k3, h);
        let z4 = tape.add(z, s)?;
        let k4 = vars.forward(tape, z4)?;
        let k23 = tape.add(k2, k3)?;
        let k23 = tape.scale(k23, 2.0);
        let acc = tape.add(k1, k23)?;
        let acc = tape.add(acc, k4)?;
        let incr = tape.scale(acc, h / 6.0);
        z = tape.add(z, incr)?;
        if !tape.value(z).all_finite() {
            return Err(ArosError::Divergence { step });
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// `W` = Gram–Schmidt orthonormalization of the raw matrix.
    #[default]
    Orthonormal,
    /// `W` = raw matrix, unconstrained.
    Plain,
}

/// Bias-free two-class head acting on `z(T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoHead {
    /// `(d, 2)`
    pub raw: Tensor,
    pub mode: HeadMode,
}

impl OrthoHead {
    pub fn init(dim: usize, mode: HeadMode, seed: u64) -> Result<Self> {
        let p = MlpParams::init("head", &[dim, 2], Activation::Identity, false, 1.0, &mut rng_from(seed))?;
        Ok(Self {
            raw: p.layers[0].weight.transpose()?,
            mode,
        })
    }

    pub fn weight_values(&self) -> Result<Tensor> {
        match self.mode {
            HeadMode::Orthonormal => orthonormalize_values(&self.raw),
            HeadMode::Plain => Ok(self.raw.clone()),
        }
    }

    pub fn weight_on_tape(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        match self.mode {
            HeadMode::Orthonormal => orthonormalize(tape, raw),
            HeadMode::Plain => Ok(raw),
        }
    }
}

impl Parameters for OrthoHead {
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("head.v".into(), &mut self.raw);
    }
}

/// Modified Gram–Schmidt on the columns of `v: (d, k)`, on the tape.
pub fn orthonormalize(tape: &mut Tape, v: Var) -> Result<Var> {
    let (_, k) = tape.value(v).dims2()?;
    let mut cols: Vec<Var> = (0..k).map(|j| tape.slice_cols(v, j, j + 1)).collect::<Result<_>>()?;
    for j in 0..k {
        let sq = tape.mul(cols[j], cols[j])?;
        let sq = tape.sum(sq);
        let norm = tape.sqrt(sq);
        let nv = tape.value(norm).item();
        if !(nv >= DEGENERATE_NORM) {
            return Err(ArosError::DegenerateHead { norm: nv });
        }
        let q = tape.div_by_scalar(cols[j], norm)?;
        cols[j] = q;
        for i in j + 1..k {
            let p = tape.mul(q, cols[i])?;
            let dot = tape.sum(p);
            let proj = tape.mul_by_scalar(q, dot)?;
            cols[i] = tape.sub(cols[i], proj)?;
        }
    }
    tape.concat_cols(&cols)
}

/// Plain-tensor twin of [`orthonormalize`].
pub fn orthonormalize_values(v: &Tensor) -> Result<Tensor> {
    let (d, k) = v.dims2()?;
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..d).map(|i| v.at(i, j)).collect()).collect();
    for j in 0..k {
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm >= DEGENERATE_NORM) {
            return Err(ArosError::DegenerateHead { norm });
        }
        cols[j].iter_mut().for_each(|x| *x /= norm);
        for i in j + 1..k {
            let dot: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
            let q = cols[j].clone();
            cols[i].iter_mut().zip(&q).for_each(|(c, qv)| *c -= dot * qv);
        }
    }
    let mut out = Tensor::zeros(&[d, k]);
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            out.set(i, j, x);
        }
    }
    Ok(out)
}

/// `||WᵀW − I||_∞` (largest entry magnitude).
pub fn orthogonality_defect(w: &Tensor) -> Result<f64> {
    let g = w.transpose()?.matmul(w)?;
    let k = g.shape()[0];
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g.at(i, j) - target).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// Both exponent arguments are clamped to `[−c_max, c_max]`.
    pub c_max: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 0.05,
            gamma3: 0.05,
            c_max: 30.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.gamma1, self.gamma2, self.gamma3].iter().any(|g| !(*g >= 0.0)) {
            return Err(ArosError::contract("loss weights must be >= 0"));
        }
        if !(self.c_max > 0.0) {
            return Err(ArosError::contract("c_max must be > 0"));
        }
        Ok(())
    }
}

/// Batch means of the individual loss terms, before weighting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    pub field_norm: f64,
    /// `−trace J` (unclamped).
    pub trace_arg: f64,
    /// `Σ_i (−|J_ii| + Σ_{j≠i} |J_ij|)` (unclamped).
    pub dominance_arg: f64,
}

fn checked(tape: &Tape, v: Var, term: &'static str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(ArosError::LossTerm { term })
    }
}

/// Stability loss on a batch `z: (B, d)` with binary labels; returns the
/// scalar loss node and the term means.
pub fn loss_sl(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    dynamics: &NodeDynamics,
    dyn_vars: &MlpVars,
    head_w: Var,
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    let b = tape.shape(z)[0];
    if b == 0 {
        return Err(ArosError::contract("loss_sl on an empty batch"));
    }
    let d = dynamics.dim();
    let z_t = rk4_integrate(tape, dyn_vars, dynamics, z)?;
    let logits = tape.matmul(z_t, head_w)?;
    let ce = tape.cross_entropy(logits, labels)?;
    checked(tape, ce, "cross_entropy")?;
    let mut per_sample = ce;
    let mut parts = LossParts {
        cross_entropy: tape.value(ce).sum() / b as f64,
        ..Default::default()
    };

    let field = dyn_vars.forward(tape, z)?;
    let norm = tape.row_norm(field)?;
    checked(tape, norm, "field_norm")?;
    parts.field_norm = tape.value(norm).sum() / b as f64;
    if cfg.gamma1 > 0.0 {
        let t = tape.scale(norm, cfg.gamma1);
        per_sample = tape.add(per_sample, t)?;
    }

    if cfg.gamma2 > 0.0 || cfg.gamma3 > 0.0 {
        let jac = dyn_vars.jacobian_batch(tape, z)?;
        let diag = tape.batch_diag(jac)?;
        let trace = tape.sum_last(diag)?;
        let trace_arg = tape.neg(trace);
        checked(tape, trace_arg, "trace")?;
        parts.trace_arg = tape.value(trace_arg).sum() / b as f64;

        let abs_j = tape.abs(jac);
        let flat = tape.reshape(abs_j, &[b, d * d])?;
        let total_abs = tape.sum_last(flat)?;
        let abs_diag = tape.abs(diag);
        let diag_abs = tape.sum_last(abs_diag)?;
        let twice = tape.scale(diag_abs, 2.0);
        let dom_arg = tape.sub(total_abs, twice)?;
        checked(tape, dom_arg, "diagonal_dominance")?;
        parts.dominance_arg = tape.value(dom_arg).sum() / b as f64;

        for (arg, gamma, term) in [
            (trace_arg, cfg.gamma2, "trace"),
            (dom_arg, cfg.gamma3, "diagonal_dominance"),
        ] {
            if gamma > 0.0 {
                let c = tape.clamp(arg, -cfg.c_max, cfg.c_max);
                let e = tape.exp(c);
                checked(tape, e, term)?;
                let t = tape.scale(e, gamma);
                per_sample = tape.add(per_sample, t)?;
            }
        }
    }
    let loss = tape.mean(per_sample);
    parts.total = tape.value(loss).item();
    if !parts.total.is_finite() {
        return Err(ArosError::LossTerm { term: "total" });
    }
    Ok((loss, parts))
}

/// Per-sample dominance violation `Σ_i (−|J_ii| + Σ_{j≠i} |J_ij|)` at each row of `z`.
pub fn dominance_violation(dynamics: &NodeDynamics, z: &Tensor) -> Result<Vec<f64>> {
    check_state(z, dynamics.dim())?;
    (0..z.rows())
        .map(|i| {
            let j = dynamics.net.jacobian_values(z.row(i))?;
            let d = dynamics.dim();
            let mut s = 0.0;
            for r in 0..d {
                for c in 0..d {
                    let a = j.at(r, c).abs();
                    s += if r == c { -a } else { a };
                }
            }
            Ok(s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Joint gradient-norm cap; the exponential regularizers can otherwise
    /// produce steps large enough to wreck the dynamics in one update.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for StabTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr0: 0.05,
            grad_clip: Some(1.0),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub parts: LossParts,
    /// Largest `||WᵀW − I||_∞` seen after any step of the epoch.
    pub max_ortho_defect: f64,
}

/// The deployable detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArosModel {
    pub encoder: Encoder,
    pub dynamics: NodeDynamics,
    pub head: OrthoHead,
    pub train: StabTrainConfig,
}

struct Trainable<'a> {
    dynamics: &'a mut NodeDynamics,
    head: &'a mut OrthoHead,
}

impl Parameters for Trainable<'_> {
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.dynamics.for_each_param_mut(f);
        self.head.for_each_param_mut(f);
    }
}

/// Minibatch SGD on the stability loss; the encoder never enters the tape.
pub fn train_aros(
    set: &EmbeddingSet,
    mut dynamics: NodeDynamics,
    mut head: OrthoHead,
    cfg: &StabTrainConfig,
) -> Result<(NodeDynamics, OrthoHead, Vec<StabEpochLog>)> {
    cfg.loss.validate()?;
    dynamics.validate()?;
    if set.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ArosError::contract("train_aros needs data, epochs and a batch size"));
    }
    if set.dim() != dynamics.dim() || head.raw.shape() != [dynamics.dim(), 2] {
        return Err(ArosError::Compatibility(format!(
            "embedding dim {}, dynamics dim {}, head {:?}",
            set.dim(),
            dynamics.dim(),
            head.raw.shape()
        )));
    }
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, "stabnet.shuffle", epoch as u64)));
        let mut sums = LossParts::default();
        let mut weight = 0.0;
        let mut max_defect = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = set.subset(chunk);
            let mut tape = Tape::new();
            let dv = dynamics.net.register(&mut tape)?;
            let raw = tape.param("head.v", head.raw.clone());
            let w = head.weight_on_tape(&mut tape, raw)?;
            let z = tape.constant(batch.embeddings);
            let (loss, parts) =
                loss_sl(&mut tape, z, &batch.labels, &dynamics, &dv, w, &cfg.loss).map_err(|e| match e {
                    ArosError::Divergence { .. } | ArosError::LossTerm { .. } => ArosError::Training {
                        epoch,
                        reason: e.to_string(),
                    },
                    other => other,
                })?;
            let mut grads = tape
                .backward(loss)
                .map_err(|e| ArosError::Training {
                    epoch,
                    reason: e.to_string(),
                })?
                .params(&tape);
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c).map_err(|e| ArosError::Training {
                    epoch,
                    reason: e.to_string(),
                })?;
            }
            sgd_step(
                &mut Trainable {
                    dynamics: &mut dynamics,
                    head: &mut head,
                },
                &grads,
                lr,
            )?;
            if head.mode == HeadMode::Orthonormal {
                let defect = orthogonality_defect(&head.weight_values()?)?;
                if !(defect <= ORTHO_TOL) {
                    return Err(ArosError::Training {
                        epoch,
                        reason: format!("head orthogonality defect {defect:e} exceeds {ORTHO_TOL:e}"),
                    });
                }
                max_defect = max_defect.max(defect);
            }
            let n = chunk.len() as f64;
            sums.total += parts.total * n;
            sums.cross_entropy += parts.cross_entropy * n;
            sums.field_norm += parts.field_norm * n;
            sums.trace_arg += parts.trace_arg * n;
            sums.dominance_arg += parts.dominance_arg * n;
            weight += n;
        }
        logs.push(StabEpochLog {
            epoch,
            lr,
            parts: LossParts {
                total: sums.total / weight,
                cross_entropy: sums.cross_entropy / weight,
                field_norm: sums.field_norm / weight,
                trace_arg: sums.trace_arg / weight,
                dominance_arg: sums.dominance_arg / weight,
            },
            max_ortho_defect: max_defect,
        });
    }
    Ok((dynamics, head, logs))
}

fn softmax_class1(logits: &[f64]) -> f64 {
    // softmax(l)[1] for two logits.
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

impl ArosModel {
    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn check_compatible(&self) -> Result<()> {
        let d = self.dynamics.dim();
        if self.encoder.embed_dim() != d || self.head.raw.shape() != [d, 2] {
            return Err(ArosError::Compatibility(format!(
                "encoder dim {}, dynamics dim {d}, head {:?}",
                self.encoder.embed_dim(),
                self.head.raw.shape()
            )));
        }
        Ok(())
    }

    /// OOD probabilities for embeddings `z: (B, d)`.
    pub fn score_embeddings(&self, z: &Tensor) -> Result<Vec<f64>> {
        let zt = self.dynamics.integrate_values(z, false)?.pop().expect("final state");
        let logits = zt.matmul(&self.head.weight_values()?)?;
        Ok(logits.data().chunks(2).map(softmax_class1).collect())
    }

    /// `softmax(Wᵀ z(T))[1]` for inputs `x`.
    pub fn ood_score(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.score_embeddings(&self.encoder.encode_values(x)?)
    }

    /// Records the full input-to-score map on `tape`; returns the `(B)` scores.
    pub fn score_graph(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encoder.check_input(tape.value(x))?;
        let ev = self.encoder.register(tape, false)?;
        let z = self.encoder.forward(tape, &ev, x)?;
        let dv = self.dynamics.net.register_frozen(tape)?;
        let zt = rk4_integrate(tape, &dv, &self.dynamics, z)?;
        let w = tape.constant(self.head.weight_values()?);
        let logits = tape.matmul(zt, w)?;
        let p = tape.row_softmax(logits)?;
        tape.slice_cols(p, 1, 2).and_then(|c| {
            let b = tape.shape(c)[0];
            tape.reshape(c, &[b])
        })
    }
}
