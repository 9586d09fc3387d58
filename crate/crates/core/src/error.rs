use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: wrong magic number {found:#010x} (expected {expected:#010x})")]
    WrongMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated payload, expected {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("count mismatch: images file holds {images} entries but labels file holds {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("not a checkpoint (bad magic)")]
    BadCheckpointMagic,

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint weight count mismatch: architecture needs {expected} weights, blob holds {found}")]
    WeightCount { expected: usize, found: usize },

    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
