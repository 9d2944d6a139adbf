use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {given}")]
    Shape { expected: String, given: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {0} is not registered in the classifier")]
    UnregisteredClass(usize),

    #[error("label {label} is outside the current task's classes")]
    LabelOutsideTask { label: usize },

    #[error("tasks must be trained in order: expected task {expected}, got {given}")]
    OutOfOrderTask { expected: usize, given: usize },

    #[error("missing snapshot: {0}")]
    MissingSnapshot(String),

    #[error("model has no batch-normalization layers")]
    NoNormalizationLayers,

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
