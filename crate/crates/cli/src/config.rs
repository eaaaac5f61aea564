use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use hdlink_core::encoder::EncoderConfig;
use hdlink_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Training configuration file, e.g.
///
/// ```toml
/// [encoder]
/// proj_dim = 128
///
/// [train]
/// epochs = 20
/// reencode = { every-steps = 1000 }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// The global seed drives both weight initialisation and data order.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.encoder.seed = seed;
        self.train.seed = seed;
        self
    }
}
