//! End-to-end orchestration: data, adversarial pretraining, fake-OOD
//! synthesis, detector training, evaluation and the ablation matrix.

use std::cell::OnceCell;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig};
use crate::datahub::{gen_blob, gen_ring, gen_two_moons, parse_idx, Dataset, Domain, IdxPayload};
use crate::error::{ArosError, Result};
use crate::lyapcheck::{stability_probe, StabilityReport};
use crate::oodforge::{
    build_embedding_set, fit_class_gaussians, sample_fake_ood, sample_uniform_box, verify_fakes, ClassGaussians,
    EmbeddingSet, FakeSamples,
};
use crate::pretrain::{adv_train, encode, Classifier, EpochLog};
use crate::redteam::{evaluate, AttackConfig, EvalReport, MspScorer};
use crate::stabnet::{
    dominance_violation, train_aros, ArosModel, HeadMode, LossConfig, NodeDynamics, OrthoHead, StabEpochLog,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub train: Dataset,
    pub id_test: Dataset,
    pub ood_test: Dataset,
    /// Outliers from a third distribution, used only by ablation F.
    pub aux: Option<Dataset>,
}

fn read_idx(path: &Path) -> Result<IdxPayload> {
    let bytes = std::fs::read(path).map_err(|e| ArosError::io(path, e))?;
    parse_idx(&bytes)
}

fn idx_images(path: &Path, limit: Option<usize>) -> Result<Tensor> {
    match read_idx(path)? {
        IdxPayload::Images(t) => {
            let n = limit.map_or(t.rows(), |l| l.min(t.rows()));
            Ok(t.gather_rows(&(0..n).collect::<Vec<_>>()))
        }
        IdxPayload::Labels(_) => Err(ArosError::config(
            "data",
            format!("{} holds labels, expected images", path.display()),
        )),
    }
}

fn idx_labels(path: &Path, limit: Option<usize>) -> Result<Vec<usize>> {
    match read_idx(path)? {
        IdxPayload::Labels(l) => {
            let n = limit.map_or(l.len(), |m| m.min(l.len()));
            Ok(l[..n].iter().map(|&v| v as usize).collect())
        }
        IdxPayload::Images(_) => Err(ArosError::config(
            "data",
            format!("{} holds images, expected labels", path.display()),
        )),
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<DataBundle> {
    match &cfg.data {
        DataConfig::Synthetic {
            n_train,
            n_id_test,
            n_ood_test,
            noise,
            ring_radius,
            ring_noise,
            aux_center,
            aux_std,
        } => Ok(DataBundle {
            train: gen_two_moons(*n_train, *noise, cfg.seed_for("data.train"))?,
            id_test: gen_two_moons(*n_id_test, *noise, cfg.seed_for("data.id_test"))?,
            ood_test: gen_ring(*n_ood_test, *ring_radius, *ring_noise, cfg.seed_for("data.ood_test"))?,
            aux: Some(gen_blob(*n_train, *aux_center, *aux_std, cfg.seed_for("data.aux"))?),
        }),
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ood_images,
            aux_images,
            max_train,
            max_test,
        } => {
            let xs = idx_images(train_images, *max_train)?;
            let ys = idx_labels(train_labels, *max_train)?;
            let k = ys.iter().copied().max().map_or(0, |m| m + 1);
            let train = Dataset::new(xs, ys, k, Domain::Image)?;
            let xt = idx_images(test_images, *max_test)?;
            let yt = idx_labels(test_labels, *max_test)?;
            let id_test = Dataset::new(xt, yt, k, Domain::Image)?;
            let single = |t: Tensor| {
                let n = t.rows();
                Dataset::new(t, vec![0; n], 1, Domain::Image)
            };
            let ood_test = single(idx_images(ood_images, *max_test)?)?;
            let aux = aux_images
                .as_ref()
                .map(|p| idx_images(p, *max_train).and_then(single))
                .transpose()?;
            Ok(DataBundle {
                train,
                id_test,
                ood_test,
                aux,
            })
        }
    }
}

pub fn train_classifier(cfg: &RunConfig, train: &Dataset, epsilon: f64) -> Result<(Classifier, Vec<EpochLog>)> {
    adv_train(train, &cfg.encoder, &cfg.adv_train(epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeSource {
    /// Low-density samples of the class Gaussians.
    Gaussian,
    /// Uniform noise in the bounding box of the ID embeddings.
    UniformBox,
    /// Half Gaussian fakes, half embeddings of auxiliary outliers.
    GaussianWithAux,
}

/// Provenance of a crafted embedding set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftReport {
    pub source: FakeSource,
    pub beta: f64,
    pub id_count: usize,
    pub fake_count: usize,
    pub per_class_fakes: Vec<usize>,
    pub acceptance_rate: Option<f64>,
    pub aux_count: usize,
    /// Fakes failing the density re-check (always 0 for a correct sampler).
    pub verify_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crafted {
    pub set: EmbeddingSet,
    pub gaussians: ClassGaussians,
    /// The Gaussian fakes with their source classes, kept for re-verification.
    pub gaussian_fakes: Option<FakeSamples>,
    pub report: CraftReport,
}

pub fn craft_ood(
    cfg: &RunConfig,
    classifier: &Classifier,
    train: &Dataset,
    source: FakeSource,
    aux: Option<&Dataset>,
) -> Result<Crafted> {
    let z = encode(classifier, &train.inputs)?;
    let k = train.num_classes;
    let gaussians = fit_class_gaussians(&z, &train.labels, k, cfg.forge.ridge)?;
    let m = train.len() / k;
    let sampler = cfg.forge.sampler();
    let seed = cfg.seed_for("forge");
    let mut per_class_fakes = vec![0; k];
    let mut acceptance_rate = None;
    let mut verify_failures = 0;
    let mut aux_count = 0;
    let mut gaussian_fakes = None;
    let fakes = match source {
        FakeSource::Gaussian | FakeSource::GaussianWithAux => {
            let (per_class, aux_n) = if source == FakeSource::GaussianWithAux {
                (m - m / 2, k * (m / 2))
            } else {
                (m, 0)
            };
            let f = sample_fake_ood(&gaussians, &sampler, per_class.max(1), seed)?;
            verify_failures = verify_fakes(&gaussians, &sampler, &f)?;
            acceptance_rate = Some(f.acceptance_rate);
            for &c in &f.classes {
                per_class_fakes[c] += 1;
            }
            let sampled = f.embeddings.clone();
            gaussian_fakes = Some(f);
            if aux_n > 0 {
                let aux = aux.ok_or_else(|| ArosError::config("data", "ablation F needs auxiliary outliers"))?;
                if aux.len() < aux_n {
                    return Err(ArosError::config(
                        "data",
                        format!("{} auxiliary outliers, need {aux_n}", aux.len()),
                    ));
                }
                let ze = encode(classifier, &aux.inputs.gather_rows(&(0..aux_n).collect::<Vec<_>>()))?;
                aux_count = aux_n;
                Tensor::concat_rows(&[&sampled, &ze])?
            } else {
                sampled
            }
        }
        FakeSource::UniformBox => sample_uniform_box(&z, k * m, seed)?,
    };
    let set = build_embedding_set(&z, &fakes, k, cfg.seed_for("forge.shuffle"))?;
    let report = CraftReport {
        source,
        beta: cfg.forge.beta,
        id_count: z.rows(),
        fake_count: fakes.rows(),
        per_class_fakes,
        acceptance_rate,
        aux_count,
        verify_failures,
    };
    Ok(Crafted {
        set,
        gaussians,
        gaussian_fakes,
        report,
    })
}

/// ID test embeddings plus an equal number of fresh low-likelihood fakes, for
/// stability measurements away from the training set.
pub fn heldout_embeddings(
    cfg: &RunConfig,
    classifier: &Classifier,
    id_test: &Dataset,
    g: &ClassGaussians,
) -> Result<EmbeddingSet> {
    let z = encode(classifier, &id_test.inputs)?;
    let k = g.num_classes();
    let per_class = (id_test.len() / k).max(1);
    let f = sample_fake_ood(g, &cfg.forge.sampler(), per_class, cfg.seed_for("forge.heldout"))?;
    build_embedding_set(&z, &f.embeddings, k, cfg.seed_for("forge.heldout.shuffle"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorVariant {
    pub loss: LossConfig,
    pub head_mode: HeadMode,
}

impl DetectorVariant {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            loss: cfg.stabnet.loss.clone(),
            head_mode: cfg.stabnet.head_mode,
        }
    }
}

pub fn init_detector(cfg: &RunConfig, dim: usize, head_mode: HeadMode) -> Result<(NodeDynamics, OrthoHead)> {
    let s = &cfg.stabnet;
    Ok((
        NodeDynamics::init(
            dim,
            s.hidden,
            s.init_gain,
            s.horizon,
            s.steps,
            cfg.seed_for("stabnet.init"),
        )?,
        OrthoHead::init(dim, head_mode, cfg.seed_for("stabnet.head"))?,
    ))
}

pub fn train_detector(
    cfg: &RunConfig,
    classifier: &Classifier,
    set: &EmbeddingSet,
    variant: &DetectorVariant,
) -> Result<(ArosModel, Vec<StabEpochLog>)> {
    let (dynamics, head) = init_detector(cfg, set.dim(), variant.head_mode)?;
    let train = cfg.stab_train(variant.loss.clone());
    let (dynamics, head, logs) = train_aros(set, dynamics, head, &train)?;
    let model = ArosModel {
        encoder: classifier.encoder.clone(),
        dynamics,
        head,
        train,
    };
    model.check_compatible()?;
    Ok((model, logs))
}

/// Held-out stability measurements of a trained detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCheck {
    /// Mean dominance-violation argument at the untrained initialization.
    pub violation_init: f64,
    pub violation_trained: f64,
    pub id_points: usize,
    pub fake_points: usize,
    pub probe: StabilityReport,
}

/// Probes `points_per_side` held-out ID embeddings and as many fresh fakes.
pub fn verify_stability(
    cfg: &RunConfig,
    classifier: &Classifier,
    model: &ArosModel,
    id_test: &Dataset,
    g: &ClassGaussians,
) -> Result<StabilityCheck> {
    let held = heldout_embeddings(cfg, classifier, id_test, g)?;
    let per_side = cfg.probe.points_per_side;
    let pick = |want: usize| -> Vec<usize> {
        (0..held.len())
            .filter(|&i| held.labels[i] == want)
            .take(per_side)
            .collect()
    };
    let (ids, fakes) = (pick(0), pick(1));
    let idx: Vec<usize> = ids.iter().chain(&fakes).copied().collect();
    let points = held.embeddings.gather_rows(&idx);

    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (init, _) = init_detector(cfg, held.dim(), model.head.mode)?;
    let violation_init = mean(dominance_violation(&init, &points)?);
    let violation_trained = mean(dominance_violation(&model.dynamics, &points)?);
    let probe = stability_probe(
        &model.dynamics,
        &points,
        cfg.probe.delta_norm,
        cfg.probe.n_dirs,
        cfg.seed_for("lyapcheck.probe"),
    )?;
    Ok(StabilityCheck {
        violation_init,
        violation_trained,
        id_points: ids.len(),
        fake_points: fakes.len(),
        probe,
    })
}

/// Rows of the component-exclusion study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationId {
    /// Cross-entropy only (all regularizer weights zero).
    A,
    /// Standard (ε = 0) encoder pretraining.
    B,
    /// Unconstrained binary head.
    C,
    /// Uniform-noise fakes instead of low-density Gaussian samples.
    D,
    /// The full method.
    E,
    /// Full method plus auxiliary outlier embeddings among the fakes.
    F,
}

impl AblationId {
    pub const ALL: [AblationId; 6] = [
        AblationId::A,
        AblationId::B,
        AblationId::C,
        AblationId::D,
        AblationId::E,
        AblationId::F,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            AblationId::A => "cross-entropy only",
            AblationId::B => "standard encoder",
            AblationId::C => "unconstrained head",
            AblationId::D => "uniform fake embeddings",
            AblationId::E => "full",
            AblationId::F => "full + auxiliary outliers",
        }
    }
}

impl std::fmt::Display for AblationId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for AblationId {
    type Err = ArosError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(AblationId::A),
            "B" => Ok(AblationId::B),
            "C" => Ok(AblationId::C),
            "D" => Ok(AblationId::D),
            "E" => Ok(AblationId::E),
            "F" => Ok(AblationId::F),
            other => Err(ArosError::contract(format!(
                "unknown ablation config {other:?} (expected A–F)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRun {
    pub id: AblationId,
    pub model: ArosModel,
    pub crafted: Crafted,
    pub logs: Vec<StabEpochLog>,
}

/// Lazily trains and caches the two encoders shared by every variant.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub data: DataBundle,
    robust: OnceCell<(Classifier, Vec<EpochLog>)>,
    standard: OnceCell<(Classifier, Vec<EpochLog>)>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_data(&cfg)?;
        Ok(Self::with_data(cfg, data))
    }

    pub fn with_data(cfg: RunConfig, data: DataBundle) -> Self {
        Self {
            cfg,
            data,
            robust: OnceCell::new(),
            standard: OnceCell::new(),
        }
    }

    fn cached<'a>(
        cell: &'a OnceCell<(Classifier, Vec<EpochLog>)>,
        make: impl FnOnce() -> Result<(Classifier, Vec<EpochLog>)>,
    ) -> Result<&'a (Classifier, Vec<EpochLog>)> {
        if let Some(v) = cell.get() {
            return Ok(v);
        }
        let v = make()?;
        Ok(cell.get_or_init(|| v))
    }

    /// Adversarially trained classifier at the configured budget.
    pub fn robust_classifier(&self) -> Result<&(Classifier, Vec<EpochLog>)> {
        Self::cached(&self.robust, || {
            train_classifier(&self.cfg, &self.data.train, self.cfg.pretrain.epsilon)
        })
    }

    /// Classifier trained without adversarial examples.
    pub fn standard_classifier(&self) -> Result<&(Classifier, Vec<EpochLog>)> {
        if self.cfg.pretrain.epsilon == 0.0 {
            return self.robust_classifier();
        }
        Self::cached(&self.standard, || train_classifier(&self.cfg, &self.data.train, 0.0))
    }

    pub fn run_variant(&self, id: AblationId) -> Result<VariantRun> {
        let classifier = match id {
            AblationId::B => &self.standard_classifier()?.0,
            _ => &self.robust_classifier()?.0,
        };
        let source = match id {
            AblationId::D => FakeSource::UniformBox,
            AblationId::F => FakeSource::GaussianWithAux,
            _ => FakeSource::Gaussian,
        };
        let crafted = craft_ood(&self.cfg, classifier, &self.data.train, source, self.data.aux.as_ref())?;
        let mut variant = DetectorVariant::from_config(&self.cfg);
        match id {
            AblationId::A => {
                variant.loss.gamma1 = 0.0;
                variant.loss.gamma2 = 0.0;
                variant.loss.gamma3 = 0.0;
            }
            AblationId::C => variant.head_mode = HeadMode::Plain,
            _ => {}
        }
        let (model, logs) = train_detector(&self.cfg, classifier, &crafted.set, &variant)?;
        Ok(VariantRun {
            id,
            model,
            crafted,
            logs,
        })
    }

    pub fn evaluate_model(&self, model: &ArosModel, attack: Option<&AttackConfig>) -> Result<EvalReport> {
        evaluate(
            model,
            &self.data.id_test,
            &self.data.ood_test,
            attack,
            &self.cfg.corruptions,
            self.cfg.seed_for("eval"),
        )
    }

    /// MSP of the standard classifier, the undefended baseline.
    pub fn evaluate_msp(&self, attack: Option<&AttackConfig>) -> Result<EvalReport> {
        let scorer = MspScorer {
            classifier: &self.standard_classifier()?.0,
        };
        evaluate(
            &scorer,
            &self.data.id_test,
            &self.data.ood_test,
            attack,
            &self.cfg.corruptions,
            self.cfg.seed_for("eval"),
        )
    }

    /// Attack configuration with the image clamp matched to the data domain.
    pub fn attack_config(&self) -> AttackConfig {
        let mut a = self.cfg.attack.clone();
        a.clamp = self.data.train.domain == Domain::Image;
        a
    }
}
