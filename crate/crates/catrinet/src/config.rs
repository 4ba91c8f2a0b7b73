//! Run configuration: one JSON file drives data generation, training,
//! evaluation and ablation. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::BatchAvg;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{AblationFlags, ModelConfig};
use crate::train::OptimConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// only "constant" is implemented; the key exists so a schedule can
    /// land without a config break
    #[serde(default = "default_beta_schedule")]
    pub beta_schedule: String,
    #[serde(default)]
    pub stop_below_train_total: Option<f64>,
}

fn default_batch_size() -> usize {
    8
}
fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    5.0
}
fn default_beta_schedule() -> String {
    "constant".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

fn default_beam_width() -> usize {
    3
}

fn default_batch_avg() -> BatchAvg {
    BatchAvg::PaperLiteral
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default = "default_beam_width")]
    pub beam_width: usize,
    #[serde(default = "default_batch_avg")]
    pub batch_avg_mode: BatchAvg,
    pub data: CorpusSpec,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.train.alpha,
            beta: self.train.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.heads < 2 {
            return Err(Error::Config("need at least 2 attention heads".into()));
        }
        if self.model.dim % self.model.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model.dim, self.model.heads
            )));
        }
        if self.data.image_size % self.model.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.data.image_size, self.model.patch_size
            )));
        }
        if self.beam_width < 1 {
            return Err(Error::Config("beam width must be >= 1".into()));
        }
        if self.train.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.train.beta_schedule != "constant" {
            return Err(Error::Config(format!(
                "unsupported beta_schedule '{}' (only \"constant\")",
                self.train.beta_schedule
            )));
        }
        self.weights().validate()?;
        self.optimizer.validate()?;
        self.data.validate()?;
        Ok(())
    }
}
