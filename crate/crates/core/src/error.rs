use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("column '{0}' not found in header")]
    MissingColumn(String),

    #[error("row {row}: cannot parse '{raw}' in column '{column}' as a number")]
    Unparseable {
        row: usize,
        column: String,
        raw: String,
    },

    #[error("feature dimension mismatch: expected {expected}, found {found} at row {row}")]
    FeatureDimension {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("segment too short: need at least {needed} points, have {available}")]
    TooShort { needed: usize, available: usize },

    #[error("invalid aggregate: {0}")]
    InvalidAggregate(String),

    #[error("horizon {horizon} is not divisible by window size {window}")]
    Divisibility { horizon: usize, window: usize },

    #[error("invalid forecaster config: {0}")]
    InvalidForecaster(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("horizon indices {0:?} are not covered by any constraint")]
    Uncovered(Vec<usize>),

    #[error("normal equations are singular; degenerate indices {0:?}")]
    Singular(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dense covariance guard exceeded: R={0} > 4096")]
    TooLarge(usize),
}

impl Error {
    /// True for failures that come from the numerical routines rather than
    /// from malformed input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Singular(_))
    }

    /// True for failures caused by the input data (files, values, lengths).
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv { .. }
                | Error::MissingColumn(_)
                | Error::Unparseable { .. }
                | Error::FeatureDimension { .. }
                | Error::TooShort { .. }
        )
    }
}
