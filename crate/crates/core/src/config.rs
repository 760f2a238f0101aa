//! Run configuration: one JSON document drives every pipeline stage, with
//! all randomness derived from a single master seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datahub::{CorruptionKind, CorruptionSpec};
use crate::error::{ArosError, Result};
use crate::oodforge::{BetaScale, Ridge, SamplerConfig};
use crate::pretrain::{AdvTrainConfig, EncoderArch};
use crate::redteam::AttackConfig;
use crate::seed::derive_seed;
use crate::stabnet::{HeadMode, LossConfig, StabTrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Two moons as ID, a surrounding ring as test OOD, a blob as auxiliary outliers.
    Synthetic {
        n_train: usize,
        n_id_test: usize,
        n_ood_test: usize,
        noise: f64,
        ring_radius: f64,
        ring_noise: f64,
        aux_center: [f64; 2],
        aux_std: f64,
    },
    /// IDX files; OOD test images carry no labels.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        ood_images: PathBuf,
        aux_images: Option<PathBuf>,
        /// Caps on the number of samples read from each file.
        max_train: Option<usize>,
        max_test: Option<usize>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            n_train: 400,
            n_id_test: 100,
            n_ood_test: 100,
            noise: 0.1,
            ring_radius: 5.0,
            ring_noise: 0.1,
            aux_center: [0.5, -1.5],
            aux_std: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epsilon: f64,
    pub inner_steps: usize,
    pub inner_alpha: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let a = AdvTrainConfig::default();
        Self {
            epsilon: a.epsilon,
            inner_steps: a.inner_steps,
            inner_alpha: a.inner_alpha,
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr0: a.lr0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    pub beta: f64,
    pub beta_scale: BetaScale,
    pub ridge: Ridge,
    pub max_tries_factor: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            // Trained embeddings are concentrated enough that an absolute
            // density threshold of 1e-3 is never reached.
            beta_scale: BetaScale::TypicalRelative,
            ridge: Ridge::default(),
            max_tries_factor: 1000,
        }
    }
}

impl ForgeConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            beta: self.beta,
            beta_scale: self.beta_scale,
            max_tries_factor: self.max_tries_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabnetConfig {
    pub hidden: usize,
    pub init_gain: f64,
    pub horizon: f64,
    pub steps: usize,
    pub loss: LossConfig,
    pub head_mode: HeadMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub grad_clip: Option<f64>,
}

impl Default for StabnetConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            init_gain: 1.0,
            horizon: 5.0,
            steps: 20,
            loss: LossConfig::default(),
            head_mode: HeadMode::Orthonormal,
            epochs: 100,
            batch_size: 64,
            lr0: 0.05,
            grad_clip: StabTrainConfig::default().grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub delta_norm: f64,
    pub n_dirs: usize,
    /// Probe points drawn from each of the ID and fake halves of the held-out set.
    pub points_per_side: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            delta_norm: 0.1,
            n_dirs: 4,
            points_per_side: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderArch,
    pub pretrain: PretrainConfig,
    pub forge: ForgeConfig,
    pub stabnet: StabnetConfig,
    pub attack: AttackConfig,
    pub corruptions: Vec<CorruptionSpec>,
    pub sweep_epsilons: Vec<f64>,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            master_seed: 0,
            data: DataConfig::default(),
            encoder: EncoderArch::default(),
            pretrain: PretrainConfig::default(),
            forge: ForgeConfig::default(),
            stabnet: StabnetConfig::default(),
            attack: AttackConfig::default(),
            corruptions: vec![CorruptionSpec {
                kind: CorruptionKind::GaussianNoise,
                severity: 3,
            }],
            sweep_epsilons: vec![0.0, 0.025, 0.05, 0.1],
            probe: ProbeConfig::default(),
        }
    }
}

fn require(ok: bool, field: &str, reason: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ArosError::config(field, reason))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ArosError::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ArosError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Seed for a named stage, derived from the master seed.
    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.master_seed, label, 0)
    }

    pub fn validate(&self) -> Result<()> {
        require(
            self.schema_version == SCHEMA_VERSION,
            "schema_version",
            format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
        )?;
        if let DataConfig::Synthetic {
            n_train,
            n_id_test,
            n_ood_test,
            noise,
            ring_radius,
            ring_noise,
            aux_std,
            ..
        } = &self.data
        {
            require(*n_train >= 8, "data.n_train", "need at least 8 training samples")?;
            require(
                *n_id_test >= 2 && *n_ood_test >= 1,
                "data.n_id_test",
                "test sets too small",
            )?;
            require(
                *noise >= 0.0 && *ring_noise >= 0.0 && *aux_std >= 0.0,
                "data.noise",
                "must be >= 0",
            )?;
            require(*ring_radius > 0.0, "data.ring_radius", "must be > 0")?;
        }
        require(self.encoder.embed_dim >= 2, "encoder.embed_dim", "must be >= 2")?;
        require(self.pretrain.epsilon >= 0.0, "pretrain.epsilon", "must be >= 0")?;
        require(self.pretrain.inner_steps >= 1, "pretrain.inner_steps", "must be >= 1")?;
        require(self.pretrain.epochs >= 1, "pretrain.epochs", "must be >= 1")?;
        require(self.pretrain.batch_size >= 1, "pretrain.batch_size", "must be >= 1")?;
        require(self.pretrain.lr0 > 0.0, "pretrain.lr0", "must be > 0")?;
        require(self.forge.beta > 0.0, "forge.beta", "must be > 0")?;
        require(
            self.forge.max_tries_factor >= 1,
            "forge.max_tries_factor",
            "must be >= 1",
        )?;
        let s = &self.stabnet;
        require(s.hidden >= 1, "stabnet.hidden", "must be >= 1")?;
        require(s.horizon > 0.0, "stabnet.horizon", "must be > 0")?;
        require(s.steps >= 1, "stabnet.steps", "must be >= 1")?;
        require(s.epochs >= 1, "stabnet.epochs", "must be >= 1")?;
        require(s.batch_size >= 1, "stabnet.batch_size", "must be >= 1")?;
        require(s.lr0 > 0.0, "stabnet.lr0", "must be > 0")?;
        require(
            s.grad_clip.map_or(true, |c| c > 0.0),
            "stabnet.grad_clip",
            "must be > 0",
        )?;
        s.loss
            .validate()
            .map_err(|e| ArosError::config("stabnet.loss", e.to_string()))?;
        self.attack
            .validate()
            .map_err(|e| ArosError::config("attack", e.to_string()))?;
        for c in &self.corruptions {
            c.validate()
                .map_err(|e| ArosError::config("corruptions", e.to_string()))?;
        }
        require(
            self.sweep_epsilons.iter().all(|e| *e >= 0.0),
            "sweep_epsilons",
            "must be >= 0",
        )?;
        require(self.probe.delta_norm > 0.0, "probe.delta_norm", "must be > 0")?;
        require(self.probe.n_dirs >= 1, "probe.n_dirs", "must be >= 1")?;
        Ok(())
    }

    pub fn adv_train(&self, epsilon: f64) -> AdvTrainConfig {
        AdvTrainConfig {
            epsilon,
            inner_steps: self.pretrain.inner_steps,
            inner_alpha: self.pretrain.inner_alpha,
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            lr0: self.pretrain.lr0,
            seed: self.seed_for("pretrain"),
        }
    }

    pub fn stab_train(&self, loss: LossConfig) -> StabTrainConfig {
        StabTrainConfig {
            epochs: self.stabnet.epochs,
            batch_size: self.stabnet.batch_size,
            lr0: self.stabnet.lr0,
            grad_clip: self.stabnet.grad_clip,
            loss,
            seed: self.seed_for("stabnet.train"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn bad_field_is_named() {
        let mut cfg = RunConfig::default();
        cfg.stabnet.lr0 = -1.0;
        match RunConfig::from_json(&cfg.to_json()) {
            Err(ArosError::Config { field, .. }) => assert_eq!(field, "stabnet.lr0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_schema_rejected() {
        let text = RunConfig::default()
            .to_json()
            .replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(RunConfig::from_json(&text), Err(ArosError::Config { .. })));
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.seed_for("pretrain"), cfg.seed_for("forge"));
    }
}
