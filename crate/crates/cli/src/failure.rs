//! Errors carrying the process exit code they map to.

use taxa_core::checkpoint::CheckpointError;
use taxa_core::config::ConfigError;
use taxa_core::dataset::DatasetError;
use taxa_core::eval::EvalError;
use taxa_core::sampler::SampleError;
use taxa_core::trainer::TrainError;

pub mod code {
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const STAGE_ORDER: u8 = 4;
    pub const NON_FINITE: u8 = 5;
    pub const UNTRAINED_LEVEL: u8 = 6;
    pub const UNKNOWN_PATH: u8 = 7;
    pub const UNRELIABLE_PROBE: u8 = 8;
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure { code, error: error.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let c = match e {
            ConfigError::Io { .. } => code::IO,
            _ => code::CONFIG,
        };
        Failure::new(c, e)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let c = match e {
            DatasetError::Taxonomy(_) | DatasetError::Synth(_) => code::CONFIG,
            _ => code::IO,
        };
        Failure::new(c, e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::new(code::IO, e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let c = match e {
            TrainError::OutOfOrder { .. } => code::STAGE_ORDER,
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => code::NON_FINITE,
            TrainError::Config(_) | TrainError::Taxonomy(_) => code::CONFIG,
            TrainError::Checkpoint(_) | TrainError::Io(_) | TrainError::Data(_) => code::IO,
            _ => code::FAILURE,
        };
        Failure::new(c, e)
    }
}

impl From<SampleError> for Failure {
    fn from(e: SampleError) -> Self {
        let c = match e {
            SampleError::UntrainedLevel { .. } => code::UNTRAINED_LEVEL,
            SampleError::UnknownPath(_) => code::UNKNOWN_PATH,
            SampleError::Invalid(_) => code::CONFIG,
            SampleError::Io { .. } => code::IO,
            SampleError::Tensor(_) => code::FAILURE,
        };
        Failure::new(c, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Sample(s) => s.into(),
            EvalError::Checkpoint(c) => c.into(),
            EvalError::SidecarMismatch(_) => Failure::new(code::IO, e),
            EvalError::Degenerate(_) | EvalError::UnknownClass { .. } => Failure::new(code::CONFIG, e),
            _ => Failure::new(code::FAILURE, e),
        }
    }
}
