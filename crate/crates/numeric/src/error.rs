use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{layer}: {op} produced a non-finite value")]
    NonFiniteIn { layer: String, op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: graph already consumed")]
    GraphConsumed,
    #[error("grad_check: non-finite function value at coordinate {0}")]
    NonFiniteProbe(usize),
}

impl TensorError {
    /// Attaches a layer name to a non-finite report; other errors pass through.
    pub fn in_layer(self, layer: &str) -> TensorError {
        match self {
            TensorError::NonFinite { op } => TensorError::NonFiniteIn { layer: layer.to_string(), op },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
