use thiserror::Error;

use crate::numkit::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value at index {index}: {context}")]
    NonFinite { index: usize, context: String },
    #[error("row {row} has norm {norm:e}, below the singularity floor")]
    Singularity { row: usize, norm: f64 },
    #[error("invalid state: {0}")]
    State(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training aborted at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
