//! Crate-wide error type.

use std::io;

use thiserror::Error;

/// Errors produced by every stage of the pipeline, from ingestion to reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported container version {found} (expected {expected})")]
    UnsupportedVersion { found: u8, expected: u8 },

    #[error("class {class} has {available} members, {requested} requested")]
    Capacity {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Cholesky factorization hit a non-positive pivot.
    #[error("kernel matrix is not positive definite: pivot {pivot:e} at index {index} (ridge {ridge:e})")]
    Conditioning {
        pivot: f64,
        index: usize,
        ridge: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("scorer does not expose input gradients")]
    NoGradient,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// True for failures that stem from numerics rather than inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Conditioning { .. })
    }
}
