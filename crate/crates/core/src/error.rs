use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("all ages are equal; min-max normalization is undefined")]
    DegenerateAges,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("pool holds {available} samples but {requested} were requested")]
    InsufficientPool { requested: usize, available: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("no samples with label {0}")]
    EmptyLabelSubset(u8),
    #[error("subset has {0} samples, at least 2 are required")]
    EmptySubset(usize),
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("regression design is degenerate (zero variance in z)")]
    DegenerateDesign,
    #[error("only one class present")]
    SingleClass,
    #[error("all samples fall in a single age bin")]
    NoAgeSpread,
    #[error("no completed results under {0}")]
    MissingResults(PathBuf),
    #[error("malformed input: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
