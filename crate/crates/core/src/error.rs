use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the library. Each variant names the offending input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}` in header")]
    MissingColumn(&'static str),

    #[error("row {row}: unparsable date `{value}`")]
    BadDate { row: usize, value: String },

    #[error("row {row}: non-numeric price `{value}`")]
    NonNumericPrice { row: usize, value: String },

    #[error("row {row}: non-positive price {value}")]
    NonPositivePrice { row: usize, value: f64 },

    #[error("row {row}: blank field")]
    BlankField { row: usize },

    #[error("duplicate date {0}")]
    DuplicateDate(chrono::NaiveDate),

    #[error("series too short: need at least {required} observations, got {actual}")]
    TooShort { required: usize, actual: usize },

    #[error("series too long for exhaustive enumeration: {actual} > {max}")]
    TooLong { max: usize, actual: usize },

    #[error("degenerate series: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("segment index {index} out of range for {count} segments")]
    SegmentOutOfRange { index: usize, count: usize },

    #[error("empty segment [{start}, {end})")]
    EmptySegment { start: usize, end: usize },

    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),

    #[error("all component densities underflowed at observation {0}")]
    DensityUnderflow(usize),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
