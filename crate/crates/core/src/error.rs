use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file while reading {context}")]
    Truncated { context: String },

    #[error("invalid text encoding in {0}")]
    Encoding(String),

    #[error("{0} unexpected trailing bytes after the last record")]
    TrailingData(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid record {index}: {message}")]
    InvalidRecord { index: usize, message: String },

    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("adaptation window is empty")]
    EmptyWindow,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("label {0} outside [0, 1]")]
    LabelOutOfRange(f64),

    #[error("unknown estimator {0:?}")]
    UnknownEstimator(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sequence too short: need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
}

impl Error {
    pub(crate) fn truncated(context: impl Into<String>) -> Self {
        Error::Truncated {
            context: context.into(),
        }
    }

    /// Whether the error comes from a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
