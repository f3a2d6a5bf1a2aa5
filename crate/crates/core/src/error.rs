use thiserror::Error;

use crate::trainer::TrainTrace;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("support violation at prompt {prompt}, response {response}: reference probability is {value}")]
    SupportViolation {
        prompt: usize,
        response: usize,
        value: f64,
    },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("dataset construction failed: {0}")]
    Construction(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize, trace: Box<TrainTrace> },

    #[error("unsupported schema {found:?}, expected {expected:?}")]
    Schema { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
