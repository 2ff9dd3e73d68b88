use thiserror::Error;

/// Failures raised by tensor construction and the autodiff tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward root must be a scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),

    #[error("computation record already consumed by a backward pass")]
    RecordConsumed,

    #[error("variable {0} does not belong to this record")]
    UnknownVar(usize),
}
