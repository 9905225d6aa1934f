use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {op} undefined at flat index {index}")]
    Domain { op: &'static str, index: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    /// A computation produced a NaN or infinity.
    #[error("non-finite value in {context} at index {index}")]
    Numeric { context: String, index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {found} (supported: {supported})")]
    Version {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: length mismatch, expected {expected} bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("simulation became unstable at step {step} (max |w| = {max_abs:e})")]
    Unstable { step: usize, max_abs: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable numeric code per error family, used by the CLI and the format tests.
    pub fn code(&self) -> u32 {
        match self {
            Error::Shape(_) => 10,
            Error::Domain { .. } => 11,
            Error::Contract(_) => 12,
            Error::Numeric { .. } => 13,
            Error::Config(_) => 14,
            Error::BadMagic { .. } => 20,
            Error::Version { .. } => 21,
            Error::Length { .. } => 22,
            Error::Format { .. } => 23,
            Error::Unstable { .. } => 30,
            Error::Io { .. } => 40,
            Error::Csv(_) => 41,
        }
    }
}
