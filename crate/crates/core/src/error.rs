use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the decoding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic at offset 0 (expected \"MMT1\")")]
    BadMagic { path: PathBuf },

    #[error("{path}: malformed header at offset {offset}: {reason}")]
    BadHeader {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error(
        "{path}: truncated payload at offset {offset}: expected {expected} bytes, found {found}"
    )]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected: u64,
        found: u64,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("manifest validation failed: {0}")]
    Manifest(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sampling rate mismatch: expected {expected} Hz, got {found} Hz")]
    RateMismatch { expected: f64, found: f64 },

    #[error("unsupported resampling ratio {from} Hz -> {to} Hz")]
    ResampleRatio { from: f64, to: f64 },

    #[error("unstable filter design: {0}")]
    UnstableFilter(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
