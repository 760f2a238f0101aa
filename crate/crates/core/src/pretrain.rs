//! Adversarial pretraining of the ID classifier and the penultimate-layer
//! encoder it leaves behind.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adgraph::{cosine_lr, sgd_step, Activation, Layer, MlpParams, MlpVars, Parameters, Tape, Var};
use crate::datahub::{Dataset, Domain};
use crate::error::{ArosError, Result};
use crate::seed::{derive_seed, rng_from};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Number of 3×3 filters of the convolutional stem; image data only.
    pub conv_filters: Option<usize>,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 16,
            conv_filters: None,
        }
    }
}

/// 3×3 convolution, tanh, 2×2 average pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStem {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvStem {
    fn filters(&self) -> usize {
        self.kernels.shape()[0]
    }

    fn out_len(&self) -> usize {
        self.filters() * ((self.in_h - 2) / 2) * ((self.in_w - 2) / 2)
    }
}

/// `f_θ`: maps inputs to `d`-dimensional embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub conv: Option<ConvStem>,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    conv: Option<(Var, Var)>,
    mlp: MlpVars,
}

impl Encoder {
    pub fn embed_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Per-sample input shape accepted by [`Encoder::forward`].
    pub fn input_shape(&self) -> Vec<usize> {
        match &self.conv {
            Some(c) => vec![c.in_h, c.in_w],
            None => vec![self.mlp.input_dim()],
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<EncoderVars> {
        let conv = self.conv.as_ref().map(|c| {
            if trainable {
                (
                    tape.param("encoder.conv.k", c.kernels.clone()),
                    tape.param("encoder.conv.b", c.bias.clone()),
                )
            } else {
                (tape.constant(c.kernels.clone()), tape.constant(c.bias.clone()))
            }
        });
        let mlp = if trainable {
            self.mlp.register(tape)?
        } else {
            self.mlp.register_frozen(tape)?
        };
        Ok(EncoderVars { conv, mlp })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.input_shape();
        if x.ndim() == 0 || x.shape()[1..] != want[..] {
            return Err(ArosError::Shape {
                op: "encode",
                lhs: x.shape().to_vec(),
                rhs: want,
            });
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, vars: &EncoderVars, x: Var) -> Result<Var> {
        let h = match (&self.conv, vars.conv) {
            (Some(c), Some((k, b))) => {
                let conv = tape.conv3x3(x, k, b)?;
                let act = tape.tanh(conv);
                tape.avg_pool2(act, c.filters(), c.in_h - 2, c.in_w - 2)?
            }
            _ => x,
        };
        vars.mlp.forward(tape, h)
    }

    /// Embeddings `(n, d)` without gradients.
    pub fn encode_values(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false)?;
        let xv = tape.leaf(x.clone());
        let z = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(z).clone())
    }
}

impl Parameters for Encoder {
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(c) = &mut self.conv {
            f("encoder.conv.k".into(), &mut c.kernels);
            f("encoder.conv.b".into(), &mut c.bias);
        }
        self.mlp.for_each_param_mut(f);
    }
}

/// Encoder plus the linear head mapping embeddings to `K` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: Layer,
}

impl Parameters for Classifier {
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.for_each_param_mut(f);
        f("head.w".into(), &mut self.head.weight);
        f("head.b".into(), &mut self.head.bias);
    }
}

pub struct ClassifierVars {
    encoder: EncoderVars,
    head_wt: Var,
    head_b: Var,
}

impl Classifier {
    pub fn init(arch: &EncoderArch, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(ArosError::contract("classifier needs at least two classes"));
        }
        let mut rng = rng_from(seed);
        let (conv, flat) = match (arch.conv_filters, input_shape) {
            (Some(f), [h, w]) if *h >= 4 && *w >= 4 => {
                let a = (6.0f64 / 18.0).sqrt();
                let data = (0..f * 9).map(|_| rand::Rng::gen_range(&mut rng, -a..a)).collect();
                let stem = ConvStem {
                    kernels: Tensor::new(vec![f, 3, 3], data)?,
                    bias: Tensor::zeros(&[f]),
                    in_h: *h,
                    in_w: *w,
                };
                let len = stem.out_len();
                (Some(stem), len)
            }
            (None, [d]) => (None, *d),
            _ => {
                return Err(ArosError::contract(format!(
                    "encoder architecture {arch:?} does not fit inputs {input_shape:?}"
                )))
            }
        };
        let mut dims = vec![flat];
        dims.extend(&arch.hidden);
        dims.push(arch.embed_dim);
        let mlp = MlpParams::init("encoder", &dims, Activation::Tanh, true, 1.0, &mut rng)?;
        let head = MlpParams::init(
            "head",
            &[arch.embed_dim, num_classes],
            Activation::Identity,
            false,
            1.0,
            &mut rng,
        )?
        .layers
        .remove(0);
        Ok(Self {
            encoder: Encoder { conv, mlp },
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.weight.shape()[0]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<ClassifierVars> {
        let encoder = self.encoder.register(tape, trainable)?;
        let (w, b) = if trainable {
            (
                tape.param("head.w", self.head.weight.clone()),
                tape.param("head.b", self.head.bias.clone()),
            )
        } else {
            (
                tape.constant(self.head.weight.clone()),
                tape.constant(self.head.bias.clone()),
            )
        };
        let head_wt = tape.transpose(w)?;
        Ok(ClassifierVars {
            encoder,
            head_wt,
            head_b: b,
        })
    }

    pub fn head_forward(&self, tape: &mut Tape, vars: &ClassifierVars, z: Var) -> Result<Var> {
        let lin = tape.matmul(z, vars.head_wt)?;
        tape.add_row(lin, vars.head_b)
    }

    pub fn logits(&self, tape: &mut Tape, vars: &ClassifierVars, x: Var) -> Result<Var> {
        let z = self.encoder.forward(tape, &vars.encoder, x)?;
        self.head_forward(tape, vars, z)
    }

    pub fn logits_values(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false)?;
        let xv = tape.leaf(x.clone());
        let l = self.logits(&mut tape, &vars, xv)?;
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits_values(x)?;
        let k = self.num_classes();
        Ok(logits
            .data()
            .chunks(k)
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

/// Penultimate embeddings `f_θ(x)`.
pub fn encode(classifier: &Classifier, x: &Tensor) -> Result<Tensor> {
    classifier.encoder.encode_values(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    /// ℓ∞ budget in input units.
    pub epsilon: f64,
    pub inner_steps: usize,
    /// Defaults to `2.5 · ε / inner_steps`.
    pub inner_alpha: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            inner_steps: 10,
            inner_alpha: None,
            epochs: 60,
            batch_size: 32,
            lr0: 0.5,
            seed: 0,
        }
    }
}

impl AdvTrainConfig {
    pub fn alpha(&self) -> f64 {
        self.inner_alpha
            .unwrap_or(2.5 * self.epsilon / self.inner_steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(ArosError::contract(format!("epsilon {} < 0", self.epsilon)));
        }
        if self.inner_steps == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(ArosError::contract(
                "inner_steps, epochs and batch_size must be positive",
            ));
        }
        if !(self.lr0 > 0.0) {
            return Err(ArosError::contract("lr0 must be positive"));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// ℓ∞ PGD on the cross-entropy: `inner_steps` signed-gradient ascent steps
/// from `x`, each projected back onto the ε-ball (and `[0, 1]` when `clamp`).
pub fn pgd_ce(
    classifier: &Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AdvTrainConfig,
    clamp: bool,
) -> Result<Tensor> {
    if !(cfg.epsilon >= 0.0) {
        return Err(ArosError::contract(format!("epsilon {} < 0", cfg.epsilon)));
    }
    if cfg.inner_steps == 0 {
        return Err(ArosError::contract("inner_steps must be >= 1"));
    }
    classifier.encoder.check_input(x)?;
    let eps = cfg.epsilon;
    let alpha = cfg.alpha();
    let x0 = x.data();
    let mut cur = x.clone();
    for _ in 0..cfg.inner_steps {
        let mut tape = Tape::new();
        let vars = classifier.register(&mut tape, false)?;
        let xv = tape.leaf(cur.clone());
        let logits = classifier.logits(&mut tape, &vars, xv)?;
        let ce = tape.cross_entropy(logits, labels)?;
        let loss = tape.sum(ce);
        let g = tape.backward(loss)?.wrt(&tape, xv);
        for ((c, &o), &gv) in cur.data_mut().iter_mut().zip(x0).zip(g.data()) {
            let stepped = *c + alpha * sign(gv);
            let mut p = o + (stepped - o).clamp(-eps, eps);
            if clamp {
                p = p.clamp(0.0, 1.0);
            }
            *c = p;
        }
    }
    let worst = cur.data().iter().zip(x0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    // (o + δ) − o can exceed δ by an ulp.
    if worst > eps * (1.0 + 1e-12) + 1e-12 {
        return Err(ArosError::contract(format!("pgd_ce left the ε-ball: {worst} > {eps}")));
    }
    Ok(cur)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub clean_accuracy: f64,
    /// Fraction classified correctly both before and after the attack.
    pub adversarial_accuracy: f64,
}

/// Clean and adversarial accuracy on `data`.
pub fn accuracies(classifier: &Classifier, data: &Dataset, cfg: &AdvTrainConfig) -> Result<(f64, f64)> {
    let clamp = data.domain == Domain::Image;
    let clean = classifier.predict(&data.inputs)?;
    let adv_x = if cfg.epsilon > 0.0 {
        pgd_ce(classifier, &data.inputs, &data.labels, cfg, clamp)?
    } else {
        data.inputs.clone()
    };
    let adv = classifier.predict(&adv_x)?;
    let n = data.len() as f64;
    let mut c_ok = 0usize;
    let mut a_ok = 0usize;
    for ((&c, &a), &y) in clean.iter().zip(&adv).zip(&data.labels) {
        if c == y {
            c_ok += 1;
            if a == y {
                a_ok += 1;
            }
        }
    }
    Ok((c_ok as f64 / n, a_ok as f64 / n))
}

/// Adversarial training: every minibatch is replaced by its PGD counterpart
/// before one SGD step on the cross-entropy, under a cosine schedule.
pub fn adv_train(data: &Dataset, arch: &EncoderArch, cfg: &AdvTrainConfig) -> Result<(Classifier, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.num_classes < 2 {
        return Err(ArosError::contract("adversarial training needs K >= 2 classes"));
    }
    let clamp = data.domain == Domain::Image;
    let mut model = Classifier::init(
        arch,
        data.sample_shape(),
        data.num_classes,
        derive_seed(cfg.seed, "pretrain.init", 0),
    )?;
    // Accuracy is logged on a fixed subsample to bound the cost.
    let probe_idx: Vec<usize> = {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng_from(derive_seed(cfg.seed, "pretrain.probe", 0)));
        idx.truncate(512);
        idx.sort_unstable();
        idx
    };
    let probe = data.subset(&probe_idx);

    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, "pretrain.shuffle", epoch as u64)));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.subset(chunk);
            let x_adv = if cfg.epsilon > 0.0 {
                pgd_ce(&model, &batch.inputs, &batch.labels, cfg, clamp)?
            } else {
                batch.inputs.clone()
            };
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true)?;
            let xv = tape.leaf(x_adv);
            let logits = model.logits(&mut tape, &vars, xv)?;
            let ce = tape.cross_entropy(logits, &batch.labels)?;
            let loss = tape.mean(ce);
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(ArosError::Training {
                    epoch,
                    reason: format!("loss {lv}"),
                });
            }
            let grads = tape
                .backward(loss)
                .map_err(|e| ArosError::Training {
                    epoch,
                    reason: e.to_string(),
                })?
                .params(&tape);
            sgd_step(&mut model, &grads, lr)?;
            loss_sum += lv;
            batches += 1;
        }
        let (clean_accuracy, adversarial_accuracy) = accuracies(&model, &probe, cfg)?;
        logs.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            clean_accuracy,
            adversarial_accuracy,
        });
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::gen_two_moons;

    fn tiny_classifier() -> Classifier {
        let arch = EncoderArch {
            hidden: vec![8],
            embed_dim: 4,
            conv_filters: None,
        };
        Classifier::init(&arch, &[2], 2, 3).unwrap()
    }

    #[test]
    fn zero_budget_is_identity() {
        let c = tiny_classifier();
        let x = gen_two_moons(10, 0.1, 0).unwrap();
        let cfg = AdvTrainConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert_eq!(pgd_ce(&c, &x.inputs, &x.labels, &cfg, false).unwrap(), x.inputs);
    }

    #[test]
    fn negative_budget_rejected() {
        let c = tiny_classifier();
        let x = gen_two_moons(4, 0.1, 0).unwrap();
        let cfg = AdvTrainConfig {
            epsilon: -0.1,
            ..Default::default()
        };
        assert!(matches!(
            pgd_ce(&c, &x.inputs, &x.labels, &cfg, false),
            Err(ArosError::Contract(_))
        ));
    }

    #[test]
    fn one_step_on_linear_logits_follows_gradient_sign() {
        // 1-D input, identity encoder, logits (0, w·x): CE of label 0 grows with w·x.
        let enc = MlpParams::from_layers(
            "encoder",
            vec![Layer {
                weight: Tensor::from_rows(&[&[1.0]]),
                bias: Tensor::zeros(&[1]),
            }],
            Activation::Identity,
            false,
        )
        .unwrap();
        let w = -2.0;
        let c = Classifier {
            encoder: Encoder { conv: None, mlp: enc },
            head: Layer {
                weight: Tensor::from_rows(&[&[0.0], &[w]]),
                bias: Tensor::zeros(&[2]),
            },
        };
        let cfg = AdvTrainConfig {
            epsilon: 0.3,
            inner_steps: 1,
            inner_alpha: Some(0.1),
            ..Default::default()
        };
        let x = Tensor::from_rows(&[&[0.5]]);
        let out = pgd_ce(&c, &x, &[0], &cfg, false).unwrap();
        assert!((out.item() - (0.5 + 0.1 * w.signum())).abs() < 1e-15);
    }

    #[test]
    fn encode_is_prefix_of_forward() {
        let c = tiny_classifier();
        let x = gen_two_moons(7, 0.1, 1).unwrap().inputs;
        let z = encode(&c, &x).unwrap();
        assert_eq!(z.shape(), &[7, 4]);
        let via_head = z
            .matmul(&c.head.weight.transpose().unwrap())
            .unwrap()
            .data()
            .chunks(2)
            .flat_map(|r| r.iter().zip(c.head.bias.data()).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        let logits = c.logits_values(&x).unwrap();
        for (a, b) in via_head.iter().zip(logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let c = tiny_classifier();
        assert!(matches!(
            encode(&c, &Tensor::zeros(&[3, 5])),
            Err(ArosError::Shape { .. })
        ));
    }

    #[test]
    fn conv_stem_shapes() {
        let arch = EncoderArch {
            hidden: vec![8],
            embed_dim: 4,
            conv_filters: Some(2),
        };
        let c = Classifier::init(&arch, &[6, 6], 3, 0).unwrap();
        let z = encode(&c, &Tensor::filled(&[2, 6, 6], 0.5)).unwrap();
        assert_eq!(z.shape(), &[2, 4]);
        assert_eq!(
            c.logits_values(&Tensor::filled(&[2, 6, 6], 0.5)).unwrap().shape(),
            &[2, 3]
        );
    }
}
