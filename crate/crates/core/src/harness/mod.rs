//! Experiment harness: configuration, checkpoints, training, and the
//! generate / sample / eval / perturb pipeline behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod train;

use thiserror::Error;

use crate::image::ImageError;
use crate::markup::MarkupError;
use crate::metrics::MetricError;
use crate::nn::NnError;
use crate::schedule::ScheduleError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Markup(#[from] MarkupError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Mismatch(String),
}

impl RunError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        RunError::Io { context: context.into(), source }
    }
}

pub use config::ExperimentConfig;
pub use pipeline::{cmd_eval, cmd_generate, cmd_perturb, cmd_sample, SampleSource};
pub use train::{cmd_train, TrainLogRecord, TrainOutcome};
