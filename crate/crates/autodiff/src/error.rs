use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph was already consumed by a backward pass; reset it before reuse")]
    GraphConsumed,
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
    #[error("parameter `{0}` is trainable but has no gradient")]
    MissingGrad(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
