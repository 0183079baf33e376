//! Run configuration file.
//!
//! The file is TOML: top-level keys, then `[model]`, `[data]`, `[split]` and
//! `[optim]` sections. Every key is optional and falls back to the default
//! shown below; unknown keys are rejected.
//!
//! ```toml
//! seed = 0                       # parameter init and batch order
//! # output_dir = "runs/base"     # checkpoints and metrics, optional
//!
//! [model]
//! d_model = 64
//! n_heads = 4
//! window_sizes = [1, 3, 5, 7]    # one odd width per encoder head
//! leap_step = 4                  # E
//! encoder_depth = 1
//! decoder_depth = 1
//! ffn_mult = 4
//! sampler = "adaptive"           # adaptive | hard_topn | cls | none
//! num_samples = 10               # N
//! encoder_variant = "full"       # full | without_wca | without_leap | without_wca_and_leap
//!
//! [data]
//! num_frames = 16                # T
//! num_objects = 4                # S
//! question_len = 8               # L
//! d_in = 32
//! num_patterns = 16              # P
//! num_classes = 8                # C
//! planted_frames = 2             # K
//! noise_sigma = 0.1
//! seed = 0
//! task = "mc"                    # mc | oe
//! num_choices = 5                # |A_mc|
//! candidate_len = 2
//!
//! [split]
//! train_samples = 2000
//! eval_samples = 500
//! # dataset = "data.bin"         # read samples from a generated file instead
//!
//! [optim]
//! lr = 0.0001
//! epochs = 20
//! batch_size = 16
//! grad_clip = 1.0                # global L2 norm cap, 0 disables
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_samples: 2000,
            eval_samples: 500,
            dataset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 20,
            batch_size: 16,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: SyntheticConfig,
    pub split: SplitConfig,
    pub optim: OptimConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("config", e.message().replace('\n', " ")))
    }

    /// Fails when a seed does not fit a TOML integer (`i64`).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::error::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format("config", format!("{} is not UTF-8", path.display())))?;
        Self::from_toml(&text)
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.data.validate() {
            problems.push(e.detail());
        }
        if let Err(e) = self.model.validate(&self.data) {
            problems.push(e.detail());
        }
        if self.split.train_samples == 0 && self.split.dataset.is_none() {
            problems.push("split.train_samples must be >= 1".into());
        }
        if self.split.eval_samples == 0 && self.split.dataset.is_none() {
            problems.push("split.eval_samples must be >= 1".into());
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            problems.push("optim.lr must be positive".into());
        }
        for (name, seed) in [("seed", self.seed), ("data.seed", self.data.seed)] {
            if i64::try_from(seed).is_err() {
                problems.push(format!("{name} must be <= {}", i64::MAX));
            }
        }
        if self.optim.batch_size == 0 {
            problems.push("optim.batch_size must be >= 1".into());
        }
        if self.optim.grad_clip < 0.0 {
            problems.push("optim.grad_clip must be >= 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
