use std::path::PathBuf;

use thiserror::Error;

use crate::scada_data::Timestamp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("row {row}: duplicate sample for turbine {turbine_id} at {timestamp}")]
    DuplicateTimestamp {
        row: usize,
        turbine_id: String,
        timestamp: Timestamp,
    },

    #[error("row {row}: timestamp {timestamp} is not aligned to the {resolution_s} s resolution")]
    MisalignedTimestamp {
        row: usize,
        timestamp: Timestamp,
        resolution_s: i64,
    },

    #[error("unknown column `{name}`; known columns are: {}", known.join(","))]
    UnknownColumn { name: String, known: Vec<String> },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("invalid series for turbine {turbine_id}: {message}")]
    InvalidSeries { turbine_id: String, message: String },

    #[error("invalid interval: {0}")]
    InvalidInterval(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("feature mismatch: expected [{}], found [{}]", expected.join(","), found.join(","))]
    FeatureMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("no healthy samples available for {0}")]
    NoHealthySamples(String),

    #[error("episode for turbine {0} has no data coverage")]
    NoCoverage(String),

    #[error("model format error: {0}")]
    ModelFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (files, configs) rather than a
    /// failure inside the pipeline.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::ModelFormat(_) | Error::DimensionMismatch { .. })
    }
}
