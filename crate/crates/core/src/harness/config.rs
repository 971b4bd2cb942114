use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Arch, ModelConfig};
use crate::objectives::DistillWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Baseline,
    Distill,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Baseline => "baseline",
            RunMode::Distill => "distill",
        })
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub mode: RunMode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub lr: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub min_freq: usize,
    pub data_dir: Option<PathBuf>,
    pub logits: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(arch: Arch, mode: RunMode) -> Self {
        TrainConfig {
            arch,
            mode,
            seed: 0,
            epochs: 20,
            batch_size: 32,
            alpha: 0.5,
            lr: 1e-3,
            step_size: 1,
            gamma: 0.9,
            embed_dim: 64,
            hidden_dim: 64,
            max_len: 128,
            min_freq: 1,
            data_dir: None,
            logits: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        DistillWeights::new(self.alpha)?;
        Ok(())
    }

    /// Cross-entropy weight actually optimized: 1 for baseline runs.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            RunMode::Baseline => 1.0,
            RunMode::Distill => self.alpha,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            max_len: self.max_len,
            ..ModelConfig::new(self.arch, vocab_size)
        }
    }
}
