//! The single JSON document that drives every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::eval::{BenchConfig, SweepGrid};
use crate::train::{StudyConfig, TaskConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub frames: usize,
    pub seeds: usize,
    pub threshold: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            seeds: 20,
            threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: u32,
    pub seed: u64,
    pub model: DecoderConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub study: StudyConfig,
    pub sweep: SweepGrid,
    pub bench: BenchConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            seed: 0,
            model: DecoderConfig::default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            study: StudyConfig::default(),
            sweep: SweepGrid::default(),
            bench: BenchConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}
