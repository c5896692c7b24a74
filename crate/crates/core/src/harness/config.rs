//! Experiment configuration: one JSON document drives the whole pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::diffusion::SamplerConfig;
use crate::markup::encode::VOCAB_SIZE;
use crate::markup::{CanvasSpec, Grammar};
use crate::markup::corpus::SplitSpec;
use crate::metrics::DtwConfig;
use crate::nn::optim::OptimConfig;
use crate::nn::unet::{ConditioningMode, ModelConfig};
use crate::sampling::ScheduledSamplingConfig;
use crate::schedule::{linear_schedule, VarianceSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub split: SplitSpec,
}

impl Default for CorpusSection {
    fn default() -> Self {
        // Desk-scale default: 1000 train / 128 test.
        CorpusSection {
            n: 1128,
            length_min: 3,
            length_max: 12,
            split: SplitSpec::Counts { train: 1000, val: 0, test: 128 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        // T=100 with the reference T=1000 endpoints (1e-4, 0.02) scaled by 10
        // so the total injected variance stays comparable.
        ScheduleSection { t_max: 100, beta_start: 1e-3, beta_end: 0.2 }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<VarianceSchedule, RunError> {
        Ok(linear_schedule(self.t_max, self.beta_start, self.beta_end)?)
    }
}

/// Architecture knobs the user actually chooses; canvas shape, vocabulary,
/// and the step-count ceiling are filled in from the rest of the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub mode: ConditioningMode,
    pub base_width: usize,
    pub cond_dim: usize,
    pub sin_dim: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            mode: ConditioningMode::CrossAttnPos,
            base_width: 32,
            cond_dim: 64,
            sin_dim: 64,
            max_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 1e-4,
            warmup_steps: 500,
            weight_decay: 0.01,
            epochs: 30,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: PathBuf,
    pub run: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { corpus: PathBuf::from("corpus"), run: PathBuf::from("run") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub grammar: Grammar,
    pub canvas: CanvasSpec,
    pub corpus: CorpusSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub ss: ScheduledSamplingConfig,
    pub sampler: SamplerConfig,
    pub dtw: DtwConfig,
    pub seed: u64,
    pub paths: PathsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grammar: Grammar::Formula,
            canvas: CanvasSpec::formula_default(),
            corpus: CorpusSection::default(),
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            optimizer: OptimizerSection::default(),
            ss: ScheduledSamplingConfig::default(),
            sampler: SamplerConfig::default(),
            dtw: DtwConfig::default(),
            seed: 0,
            paths: PathsSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| RunError::io(format!("reading config {}", path.display()), e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&raw)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The full architecture description, with the derived fields (canvas
    /// shape, vocabulary size, step ceiling) filled in.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.model.mode,
            base_width: self.model.base_width,
            cond_dim: self.model.cond_dim,
            sin_dim: self.model.sin_dim,
            max_len: self.model.max_len,
            vocab_size: VOCAB_SIZE,
            max_t: self.schedule.t_max,
            height: self.canvas.height,
            width: self.canvas.width,
        }
    }

    /// Optimizer settings for a training set of `train_len` examples.
    pub fn optim_config(&self, train_len: usize) -> OptimConfig {
        OptimConfig {
            base_lr: self.optimizer.lr,
            warmup_steps: self.optimizer.warmup_steps,
            total_steps: self.total_steps(train_len),
            weight_decay: self.optimizer.weight_decay,
            ..OptimConfig::default()
        }
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        train_len.div_ceil(self.optimizer.batch_size) as u64
    }

    pub fn total_steps(&self, train_len: usize) -> u64 {
        (self.optimizer.epochs as u64) * self.steps_per_epoch(train_len)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |msg: String| Err(RunError::Config(msg));
        self.canvas.validate()?;
        self.model_config().validate()?;
        self.schedule.build()?;
        if self.corpus.length_min < 1 || self.corpus.length_min > self.corpus.length_max {
            return bad(format!(
                "corpus length range {}..={} is not usable",
                self.corpus.length_min, self.corpus.length_max
            ));
        }
        if self.optimizer.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.optimizer.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.optimizer.lr));
        }
        if self.optimizer.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        self.ss.validate().map_err(RunError::Config)?;
        self.dtw.validate().map_err(RunError::Config)?;
        Ok(())
    }

    /// Equality modulo output locations: two configs are interchangeable for
    /// checkpoint resume when everything except `paths` agrees.
    pub fn same_experiment(&self, other: &ExperimentConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.paths = PathsSection::default();
        b.paths = PathsSection::default();
        a == b
    }

    /// Looser check for inference: a trained checkpoint can be sampled under
    /// any sampler/seed as long as the data format and architecture agree.
    pub fn same_architecture(&self, other: &ExperimentConfig) -> bool {
        self.grammar == other.grammar
            && self.canvas == other.canvas
            && self.schedule == other.schedule
            && self.model == other.model
    }
}
