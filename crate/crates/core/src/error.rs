use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("unknown kernel `{name}` (available: {available})")]
    UnknownKernel { name: String, available: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("blob `{tensor}` does not match manifest shape: expected {expected} values, blob holds {actual}")]
    BlobShapeMismatch {
        tensor: String,
        expected: usize,
        actual: usize,
    },

    #[error("blob `{tensor}` is truncated: {bytes} bytes is not a whole number of 32-bit values")]
    TruncatedBlob { tensor: String, bytes: usize },

    #[error("prune plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("prune mask for `{0}` keeps no filters")]
    EmptyMask(String),

    #[error("layer `{0}` is not prunable")]
    NonPrunable(String),

    #[error("calibration source error: {0}")]
    CalibrationSource(String),

    #[error("non-finite input in {0}")]
    NonFiniteInput(String),

    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
