use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated stream while reading {0}")]
    Truncated(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing mandatory column `{0}`")]
    MissingColumn(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A statistic is mathematically undefined for the given input
    /// (zero variance, a single class, no comparable pairs, ...).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("rank-deficient design: column `{0}` is constant or collinear")]
    RankDeficient(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn undefined(msg: impl Into<String>) -> Self {
        Error::Undefined(msg.into())
    }
}
