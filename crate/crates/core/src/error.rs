use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("records out of order at index {index}: timestamp {timestamp} does not follow {previous}")]
    Unsorted {
        index: usize,
        previous: i64,
        timestamp: i64,
    },

    #[error("granularity M={0} missing from location record")]
    MissingGranularity(u32),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("not enough distinct points for {clusters} clusters (have {distinct})")]
    TooFewPoints { distinct: usize, clusters: usize },

    #[error("location id {id} out of range for M={m}")]
    LocationOutOfRange { id: u32, m: u32 },

    #[error("dimension mismatch in {group}: expected {expected}, got {actual}")]
    DimensionMismatch {
        group: String,
        expected: usize,
        actual: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("missing input {0}")]
    MissingInput(PathBuf),

    #[error("hash mismatch for {path}: manifest has {expected}, found {actual}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn parse(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.to_string(),
        }
    }
}

impl Error {
    /// Stable snake_case tag for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Unsorted { .. } => "unsorted",
            Error::MissingGranularity(_) => "missing_granularity",
            Error::InvalidConfig(_) => "invalid_config",
            Error::TooFewPoints { .. } => "too_few_points",
            Error::LocationOutOfRange { .. } => "location_out_of_range",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::EmptyInput(_) => "empty_input",
            Error::NonFinite { .. } => "non_finite",
            Error::Parse { .. } => "parse",
            Error::MissingInput(_) => "missing_input",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Leakage(_) => "leakage",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
