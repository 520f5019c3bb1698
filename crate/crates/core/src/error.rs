use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure category, used by the command-line front end to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: non-finite value encountered{}", .layer.as_ref().map(|l| format!(" at layer {l}")).unwrap_or_default())]
    NonFinite { op: &'static str, layer: Option<String> },

    #[error("{op}: spatial dimensions must be even, got {height}x{width}")]
    OddSpatial {
        op: &'static str,
        height: usize,
        width: usize,
    },

    #[error("pool index {offset} lies outside its 2x2 source window at ({y}, {x})")]
    IndexOutOfWindow { offset: usize, y: usize, x: usize },

    #[error("label {label} is outside the class range 0..{classes}")]
    InvalidLabel { label: usize, classes: usize },

    #[error("batch normalization in train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("batch normalization running statistics are uninitialized")]
    StatsUninitialized,

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("backward called without a train-mode forward cache")]
    MissingCache,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint topology fingerprint mismatch: file {file:#018x}, graph {graph:#018x}")]
    FingerprintMismatch { file: u64, graph: u64 },

    #[error("nifti: {0}")]
    Nifti(String),

    #[error("nifti: unsupported datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("{path}: expected {expected} bytes, found {actual}")]
    LengthMismatch { path: PathBuf, expected: u64, actual: u64 },

    #[error("label convention mismatch: expected {expected}, found {found}")]
    ConventionMismatch { expected: String, found: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    Diverged { epoch: usize, batch: usize, norms: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } | Error::Diverged { .. } => ErrorKind::Numerical,
            Error::InvalidArgument(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}
