//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("decode error in {path} at byte {offset}: {reason}")]
    Decode {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("invalid json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("manifest validation failed: {0}")]
    ManifestInvalid(String),

    #[error("split rejected: {0}")]
    SplitRejected(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: String },

    #[error("non-finite loss at step {step}; last good checkpoint retained")]
    NonFiniteLoss { step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
