//! Fixtures shared by the benchmarks: an untrained detector at the default
//! shape and seeded random inputs.

use aros_core::config::RunConfig;
use aros_core::pretrain::Classifier;
use aros_core::stabnet::{ArosModel, NodeDynamics, OrthoHead, StabTrainConfig};
use aros_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

/// Detector with the default architecture and seeded initial weights.
pub fn default_model(seed: u64) -> Result<ArosModel> {
    let cfg = RunConfig::default();
    let classifier = Classifier::init(&cfg.encoder, &[2], 2, seed)?;
    let d = classifier.encoder.embed_dim();
    let s = &cfg.stabnet;
    Ok(ArosModel {
        encoder: classifier.encoder,
        dynamics: NodeDynamics::init(d, s.hidden, s.init_gain, s.horizon, s.steps, seed + 1)?,
        head: OrthoHead::init(d, s.head_mode, seed + 2)?,
        train: StabTrainConfig::default(),
    })
}
