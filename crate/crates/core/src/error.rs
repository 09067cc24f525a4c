use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("region {region} is out of bounds for a {height}x{width} grid")]
    OutOfBounds {
        region: String,
        height: usize,
        width: usize,
    },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("annotation is in {actual} space, expected {expected}")]
    WrongSpace {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("need at least {needed} records, have {have}")]
    TooFewRecords { needed: usize, have: usize },
    #[error("duplicate noise id `{0}`")]
    DuplicateNoiseId(String),
    #[error("no tensor for noise `{0}`")]
    MissingTensor(String),
    #[error("adapter timed out after {0:?}; request files left in place")]
    Timeout(std::time::Duration),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("adapter exited with code {0}")]
    AdapterExit(i32),
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("npy format error: {0}")]
    Npy(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
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
