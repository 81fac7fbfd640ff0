use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the library. The CLI maps variants to exit codes,
/// so keep failure classes distinct rather than collapsing them into strings.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        found: [u8; 4],
        expected: [u8; 4],
    },

    #[error("{path}: unsupported format version {found}, expected {expected}")]
    BadVersion { path: PathBuf, found: u8, expected: u8 },

    #[error("{path}: truncated payload: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: {extra} trailing bytes after the last record")]
    TrailingData { path: PathBuf, extra: u64 },

    #[error("{path}: line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("zero-norm vector in {context}")]
    ZeroVector { context: String },

    #[error("invalid record {index}: {detail}")]
    InvalidRecord { index: usize, detail: String },

    #[error("empty input: {context}")]
    EmptyInput { context: String },

    #[error("invalid configuration: {detail}")]
    InvalidConfig { detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn dim_mismatch(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimMismatch { context: context.into(), expected, found }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }

    pub fn zero_vector(context: impl Into<String>) -> Self {
        Error::ZeroVector { context: context.into() }
    }

    pub fn invalid_record(index: usize, detail: impl Into<String>) -> Self {
        Error::InvalidRecord { index, detail: detail.into() }
    }

    pub fn empty_input(context: impl Into<String>) -> Self {
        Error::EmptyInput { context: context.into() }
    }

    pub fn invalid_config(detail: impl Into<String>) -> Self {
        Error::InvalidConfig { detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
