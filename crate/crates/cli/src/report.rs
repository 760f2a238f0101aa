use std::path::Path;

use aros_core::config::RunConfig;
use aros_core::{ArosError, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A command result stamped with everything needed to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub result: T,
}

impl<T> Report<T> {
    pub fn new(command: &str, cfg: &RunConfig, result: T) -> Self {
        Self {
            command: command.into(),
            config: cfg.clone(),
            seed: cfg.master_seed,
            result,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| ArosError::io(path, e))
}

pub fn read_report<T: DeserializeOwned>(path: &Path) -> Result<Report<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| ArosError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ArosError::Compatibility(format!("{}: {e}", path.display())))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| ArosError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| ArosError::io(path, e))
}
