use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or non-conformable shapes.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse (wrong rank, unknown layer name, non-scalar loss, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or unreadable input data.
    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    /// An operation produced NaN or infinity.
    #[error("numeric overflow in `{op}`")]
    NumericOverflow { op: &'static str },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch} ({cause}; last good epoch: {last_good:?})")]
    Diverged {
        epoch: usize,
        last_good: Option<usize>,
        cause: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Distinct failure modes when reading a checkpoint.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a STYLNET1 checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    VariantMismatch { expected: String, found: String },
    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Config(format!("{op}: shape mismatch {a:?} vs {b:?}"))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
