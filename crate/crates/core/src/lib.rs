//! Score-matching training and Langevin sampling for neural temporal point
//! processes, plus calibration metrics and a Hawkes-process oracle.
//!
//! Data flows `data` → `model` (encoder + head) → `training` → `sampling` →
//! `metrics`. The `hawkes` module simulates ground truth and supplies exact
//! scores, cdfs and samples to check every stage against.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod hawkes;
pub mod head;
pub mod metrics;
pub mod model;
pub mod sampling;
pub mod training;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, RunConfig};
pub use data::{Dataset, Event, EventSequence, Normalizer, NormalizerMode};
pub use hawkes::{HawkesError, HawkesParams, NextEventDistribution};
pub use metrics::{MetricReport, QuantileGrid, SamplePack};
pub use model::{Model, ModelConfig, ModelError};
pub use sampling::{SampleError, SamplerConfig};
pub use training::{TrainConfig, TrainError, Trainer};

use thiserror::Error;

/// Any failure surfaced by the library, grouped for callers that only need
/// to tell configuration problems from numerical ones.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Hawkes(#[from] HawkesError),
}

impl Error {
    /// True for failures caused by non-finite or diverging numbers rather
    /// than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Train(TrainError::NonFinite { .. })
                | Error::Sample(SampleError::Diverged { .. })
                | Error::Model(ModelError::NonFinite(_))
                | Error::Hawkes(HawkesError::Runaway)
        )
    }
}
