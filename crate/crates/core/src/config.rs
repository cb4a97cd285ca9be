//! Experiment configuration read from flat `key = value` text.
//!
//! Lines starting with `#` and blank lines are ignored. Keys follow the
//! hyperparameter table names (`t_conv`, `initial_vth`, `lambda`,
//! `pca_components`, `train_batch_size`, `test_batch_size`, `learning_rate`,
//! `acs_constraint`, `pca_base`, `eta`) plus architecture and schedule keys.
//! A `preset = name` line, if present, must come first and replaces the toy
//! defaults with a published preset.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{Optimizer, TrainConfig};

/// Everything one pipeline run needs besides its input checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    /// Samples used for importance, traces and calibration metrics.
    pub calib_size: usize,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub acs_constraint: f64,
    pub test_batch_size: usize,
    /// Baseline training schedule.
    pub baseline: TrainConfig,
    /// Retraining schedule shared by both pruning stages.
    pub retrain: TrainConfig,
}

impl ExperimentConfig {
    /// The desk-scale keyword-task setup.
    pub fn toy() -> Self {
        let model = ModelConfig {
            pca_base: 1.05,
            ..ModelConfig::toy()
        };
        let baseline = TrainConfig {
            epochs: 8,
            learning_rate: 0.002,
            pca_interval: 0,
            batch_size: 16,
            timestep_aware: true,
            pca_base: model.pca_base,
            variance_threshold: model.variance_threshold,
            ..TrainConfig::default()
        };
        let retrain = TrainConfig {
            epochs: 3,
            penalty_epochs: 2,
            learning_rate: 0.001,
            mask_learning_rate: 0.05,
            threshold_learning_rate: 0.003,
            lambda: 5e-9,
            eta: 0.001,
            pca_interval: 2,
            ..baseline.clone()
        };
        Self {
            model,
            seed: 0,
            train_size: 2000,
            test_size: 500,
            calib_size: 64,
            train_data: None,
            test_data: None,
            acs_constraint: 0.6,
            test_batch_size: 32,
            baseline,
            retrain,
        }
    }

    /// Full-scale hyperparameters of a named GLUE task on the 4-layer BERT
    /// geometry. These are recorded for reference; they are far beyond
    /// desk-scale compute.
    pub fn preset(name: &str) -> Result<Self> {
        // (t_conv, initial_vth, lambda, train bs, test bs, lr, eta)
        let row = match name.to_ascii_lowercase().as_str() {
            "mnli" => (140, 0.85, 1e-12, 32, 128, 5e-8, 0.002),
            "qqp" => (80, 1.0, 2e-12, 80, 128, 1e-7, 0.001),
            "qnli" => (110, 0.9, 2e-12, 16, 128, 1e-7, 0.0015),
            "sst2" | "sst-2" => (85, 1.0, 5e-12, 16, 32, 5e-10, 0.001),
            "mrpc" => (110, 0.9, 5e-12, 32, 128, 1e-8, 0.0005),
            "toy" => return Ok(Self::toy()),
            _ => return Err(invalid(format!("unknown preset `{name}`"))),
        };
        let (t_conv, vth, lambda, bs, test_bs, lr, eta) = row;
        let mut c = Self::toy();
        c.model = ModelConfig {
            num_layers: 4,
            hidden_size: 768,
            num_heads: 12,
            intermediate_size: 3072,
            seq_len: 128,
            vocab_size: 30522,
            num_classes: if name.eq_ignore_ascii_case("mnli") { 3 } else { 2 },
            t_conv,
            initial_vth: vth,
            variance_threshold: 0.99999,
            pca_base: 1.02,
            ..c.model
        };
        c.test_batch_size = test_bs;
        c.acs_constraint = 0.6;
        for t in [&mut c.baseline, &mut c.retrain] {
            t.batch_size = bs;
            t.learning_rate = lr;
            t.optimizer = Optimizer::Momentum;
            t.pca_base = 1.02;
            t.variance_threshold = 0.99999;
        }
        c.retrain.lambda = lambda;
        c.retrain.eta = eta;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { path: line, message } => Error::Parse {
                path: format!("{} {line}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::toy();
        let mut first = true;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: format!("line {}", i + 1),
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if !first {
                    return Err(err("`preset` must be the first setting".into()));
                }
                config = Self::preset(value).map_err(|e| err(e.to_string()))?;
            } else {
                config.set(key, value).map_err(|e| err(e.to_string()))?;
            }
            first = false;
        }
        config.validate()?;
        Ok(config)
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| invalid(format!("`{key}` cannot take the value `{v}`")))
        }
        let both = |c: &mut Self, f: &dyn Fn(&mut TrainConfig)| {
            f(&mut c.baseline);
            f(&mut c.retrain);
        };
        match key {
            "num_layers" => self.model.num_layers = p(key, value)?,
            "hidden_size" => self.model.hidden_size = p(key, value)?,
            "num_heads" => self.model.num_heads = p(key, value)?,
            "intermediate_size" => self.model.intermediate_size = p(key, value)?,
            "seq_len" => self.model.seq_len = p(key, value)?,
            "vocab_size" => self.model.vocab_size = p(key, value)?,
            "num_classes" => self.model.num_classes = p(key, value)?,
            "leak" => self.model.leak = p(key, value)?,
            "t_conv" => self.model.t_conv = p(key, value)?,
            "initial_vth" => self.model.initial_vth = p(key, value)?,
            "pca_components" => {
                let v: f64 = p(key, value)?;
                self.model.variance_threshold = v;
                both(self, &|t| t.variance_threshold = v);
            }
            "pca_base" => {
                let v: f64 = p(key, value)?;
                self.model.pca_base = v;
                both(self, &|t| t.pca_base = v);
            }
            "seed" => self.seed = p(key, value)?,
            "train_size" => self.train_size = p(key, value)?,
            "test_size" => self.test_size = p(key, value)?,
            "calib_size" => {
                let v: usize = p(key, value)?;
                self.calib_size = v;
                both(self, &|t| t.calibration_size = v);
            }
            "train_data" => self.train_data = Some(PathBuf::from(value)),
            "test_data" => self.test_data = Some(PathBuf::from(value)),
            "acs_constraint" => self.acs_constraint = p(key, value)?,
            "train_batch_size" => {
                let v: usize = p(key, value)?;
                both(self, &|t| t.batch_size = v);
            }
            "test_batch_size" => self.test_batch_size = p(key, value)?,
            "optimizer" => {
                let v: Optimizer = p(key, value)?;
                both(self, &|t| t.optimizer = v);
            }
            "momentum" => {
                let v: f64 = p(key, value)?;
                both(self, &|t| t.momentum = v);
            }
            "temperature" => {
                let v: f64 = p(key, value)?;
                both(self, &|t| t.temperature = v);
            }
            "learning_rate" => self.baseline.learning_rate = p(key, value)?,
            "epochs" => self.baseline.epochs = p(key, value)?,
            "retrain_learning_rate" => self.retrain.learning_rate = p(key, value)?,
            "retrain_epochs" => self.retrain.epochs = p(key, value)?,
            "penalty_epochs" => self.retrain.penalty_epochs = p(key, value)?,
            "pca_interval" => self.retrain.pca_interval = p(key, value)?,
            "mask_learning_rate" => self.retrain.mask_learning_rate = p(key, value)?,
            "threshold_learning_rate" => {
                let v: f64 = p(key, value)?;
                both(self, &|t| t.threshold_learning_rate = v);
            }
            "lambda" => self.retrain.lambda = p(key, value)?,
            "eta" => self.retrain.eta = p(key, value)?,
            "rho" => self.retrain.rho = p(key, value)?,
            "timestep_aware" => self.retrain.timestep_aware = p(key, value)?,
            "baseline_timestep_aware" => self.baseline.timestep_aware = p(key, value)?,
            _ => return Err(invalid(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.baseline.validate()?;
        self.retrain.validate()?;
        if !(self.acs_constraint > 0.0 && self.acs_constraint <= 1.0) {
            return Err(invalid(format!(
                "acs_constraint must lie in (0, 1], got {}",
                self.acs_constraint
            )));
        }
        if self.test_batch_size == 0 || self.calib_size == 0 {
            return Err(invalid("test_batch_size and calib_size must be at least 1"));
        }
        Ok(())
    }
}
