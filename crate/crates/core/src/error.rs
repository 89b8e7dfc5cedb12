use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A declarative description (protocol, config, hyperparameter) is inconsistent.
    #[error("validation error: {0}")]
    Validation(String),

    /// A class does not have enough examples for the requested split.
    #[error("insufficient data for class {class}: need {needed}, have {available}")]
    InsufficientData {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("ingestion error at {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    /// A caller broke an operation's precondition (shapes, ranges, emptiness).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    /// A trainer tried to read an example outside its permitted index set.
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("non-finite loss at session {session}, epoch {epoch}, step {step}")]
    NonFiniteLoss {
        session: usize,
        epoch: usize,
        step: usize,
    },

    /// A run stopped on request before finishing; its directory can be resumed.
    #[error("interrupted: {0}")]
    Interrupted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn ingestion(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
