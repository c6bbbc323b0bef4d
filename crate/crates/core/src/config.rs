//! Experiment configuration: one TOML document covering model, training,
//! execution engine, data and output paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sparse::{choose_gsize, Engine, REFERENCE_GSIZE_SCALE};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub kind: Engine,
    /// Fixed group size. When absent it is derived from `gsize_scale`.
    pub gsize: Option<usize>,
    /// Group size per expected executing token in a batch.
    pub gsize_scale: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { kind: Engine::Sparse, gsize: None, gsize_scale: REFERENCE_GSIZE_SCALE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Text file to train on. A synthetic corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub val_fraction: f64,
    pub synth: SynthConfig,
    /// Maximum number of validation windows scored by `eval`.
    pub eval_windows: usize,
    pub eval_batch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { corpus: None, val_fraction: 0.05, synth: SynthConfig::default(), eval_windows: 64, eval_batch: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { checkpoint: PathBuf::from("run/model.ckpt"), metrics: PathBuf::from("run/metrics.jsonl") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub engine: EngineConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            engine: EngineConfig::default(),
            data: DataConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Toml(m) => Error::Toml(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.max_seq {}",
                self.train.seq_len, self.model.max_seq
            )));
        }
        if self.engine.gsize == Some(0) {
            return Err(Error::Config("engine.gsize must be positive".into()));
        }
        if !(self.engine.gsize_scale > 0.0) {
            return Err(Error::Config("engine.gsize_scale must be positive".into()));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::Config(format!("data.val_fraction must be in (0, 1), got {}", self.data.val_fraction)));
        }
        if self.data.eval_windows == 0 || self.data.eval_batch == 0 {
            return Err(Error::Config("data.eval_windows and data.eval_batch must be positive".into()));
        }
        Ok(())
    }

    /// Group size in force for a batch of `batch x seq` tokens.
    pub fn gsize(&self, batch: usize, seq: usize) -> usize {
        self.engine
            .gsize
            .unwrap_or_else(|| choose_gsize(self.model.effective_p(), batch, seq, self.engine.gsize_scale))
    }
}
