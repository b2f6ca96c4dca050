use djscc_autodiff::TensorError;
use thiserror::Error;

use crate::channel::ChannelError;
use crate::metrics::MetricError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape violation: {0}")]
    Shape(String),
    #[error("expected {expected} symbols per image, got {actual}")]
    SymbolCount { expected: usize, actual: usize },
    #[error("{stage} training diverged at iteration {iter}: {reason}")]
    Diverged {
        stage: &'static str,
        iter: usize,
        reason: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
