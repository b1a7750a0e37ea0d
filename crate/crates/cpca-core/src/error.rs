//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by dataset handling, model contracts and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or label map violated a documented shape/value contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Synthetic generation could not satisfy the coverage constraint.
    #[error("dataset generation failed: {0}")]
    Generation(String),

    /// A manifest entry referenced a missing or unreadable file.
    #[error("dataset load failed for entry `{entry}`: {reason}")]
    DatasetLoad { entry: String, reason: String },

    /// Malformed manifest, palette or metric-record text.
    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    /// The prototype bank has classes that were never observed.
    #[error("prototype bank incomplete: classes {0:?} have no prototype")]
    IncompleteBank(Vec<usize>),

    /// No usable pixels or samples for the requested operation.
    #[error("{0}")]
    Empty(String),

    /// A gradient or parameter became non-finite during optimization.
    #[error("non-finite value in `{tensor}` at iteration {iteration}")]
    NonFinite { tensor: String, iteration: usize },

    /// Checkpoint container problems, each with a distinct code.
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {reason}")]
    Png { path: PathBuf, reason: String },
}

/// Failure modes when reading a checkpoint container.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a CPCA checkpoint)")]
    BadMagic,
    #[error("format version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("config digest mismatch: file has {found:#018x}, expected {expected:#018x}")]
    DigestMismatch { found: u64, expected: u64 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
