//! Flow-matching schedules and reparameterizations, the weighted objective,
//! classifier-free guidance, the Euler sampler and the two-stage cascade.

mod sampler;
mod schedule;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::nets::NetError;

pub use sampler::{gaussian_noise, ode_integrate, ode_sample, Branch};
pub use schedule::{
    cfg_combine, clamp_time, eps_from_v, fm_loss, fm_loss_v, fm_loss_var, fm_weight, forward_interpolate,
    schedule_eval, velocity_from_eps, velocity_target, Schedule, ScheduleEval, SnrTerms, T_MIN,
};
pub use train::{
    cascade_sample, check_cascade, sample_anchors, sample_features, validation_loss, FlowModel, LatentPointCloud,
    ModelConfig, StepRecord, TrainConfig, TrainSample, Trainer,
};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("time {0} outside [0, 1]")]
    TimeRange(f64),
    #[error("time {0} is an endpoint; the log-SNR terms are infinite there")]
    Endpoint(f64),
    #[error(transparent)]
    Shape(#[from] AutodiffError),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("sampler needs at least one step")]
    Steps,
    #[error("training diverged (non-finite loss or gradient) at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FlowError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        FlowError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
