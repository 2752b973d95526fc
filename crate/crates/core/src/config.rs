//! One declarative document holding every module's settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::pipeline::PipelineConfig;
use crate::quantizer::QuantizerConfig;
use crate::training::{CorpusSpec, TrainConfig};
use crate::{Error, Result};

/// Missing tables and keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub quantizer: QuantizerConfig,
    pub training: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            quantizer: QuantizerConfig::default(),
            training: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.pipeline.validate()?;
        if self.quantizer.codes == 0 || self.quantizer.restarts == 0 {
            return Err(Error::Config("quantizer needs at least one code and one restart".into()));
        }
        Ok(())
    }

    /// Parse and validate.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
