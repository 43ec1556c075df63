//! Error types shared across the engine.

use thiserror::Error;

/// Configuration and hyperparameter validation failures. Messages carry the
/// offending field path so CLI diagnostics stay precise.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Violations of cross-rank protocol preconditions.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("rank step mismatch: expected {expected}, rank {rank} is at {actual}")]
    StepMismatch {
        expected: u64,
        rank: usize,
        actual: u64,
    },
    #[error("differential batch chain gap: expected start {expected}, got {actual}")]
    BatchGap { expected: u64, actual: u64 },
    #[error("decompressed length {actual} does not match partition length {expected}")]
    LengthMismatch { expected: usize, actual: usize },
}

/// Storage-layer failures.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("tier unavailable: {0}")]
    Unavailable(String),
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("corrupt object: {0}")]
    Corruption(String),
    #[error("commit integrity: {0}")]
    CommitIntegrity(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Errors out of a single optimizer step: bad hyperparameters are a
/// configuration problem, everything else a protocol violation.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Recovery planning and execution failures.
#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("no base checkpoint version is obtainable by every rank")]
    Unrecoverable,
    #[error("planned source vanished twice for {0}")]
    SourceVanished(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<StepError> for RecoveryError {
    fn from(e: StepError) -> Self {
        match e {
            StepError::Protocol(p) => RecoveryError::Protocol(p),
            StepError::Config(c) => RecoveryError::Config(c),
        }
    }
}
