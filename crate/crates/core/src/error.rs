use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DufmError>;

#[derive(Debug, Error)]
pub enum DufmError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numeric failure in {context} (input hash {input_hash:016x})")]
    NumericFailure { context: String, input_hash: u64 },

    #[error("unsupported model kind for {op}: {kind}")]
    UnsupportedKind { op: &'static str, kind: String },

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("problem too large: {params} parameters exceeds the dense limit of {limit}")]
    TooLarge { params: usize, limit: usize },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DufmError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        DufmError::InvalidDimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        DufmError::InvalidParameter(msg.into())
    }
}
