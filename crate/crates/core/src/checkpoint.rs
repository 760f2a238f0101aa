//! Versioned JSON container for pipeline artifacts.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{ArosError, Result};

pub const FORMAT: &str = "aros-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Classifier,
    EmbeddingSet,
    ArosModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub kind: ArtifactKind,
    /// Configuration and seed that produced the payload.
    pub config: RunConfig,
    pub seed: u64,
    pub payload: T,
}

impl<T: Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn new(kind: ArtifactKind, config: &RunConfig, payload: T) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            config: config.clone(),
            seed: config.master_seed,
            payload,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| ArosError::io(path, e))
    }

    /// Loads and checks the container header against the expected kind.
    pub fn load(path: &Path, kind: ArtifactKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ArosError::io(path, e))?;
        let ck: Self =
            serde_json::from_str(&text).map_err(|e| ArosError::Compatibility(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(ArosError::Compatibility(format!(
                "{}: container {} v{} (want {FORMAT} v{VERSION})",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        if ck.kind != kind {
            return Err(ArosError::Compatibility(format!(
                "{}: holds {:?}, expected {kind:?}",
                path.display(),
                ck.kind
            )));
        }
        Ok(ck)
    }
}
