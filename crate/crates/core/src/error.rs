use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("cache does not match the forward call: {0}")]
    CacheMismatch(String),
    #[error("class {0} has no items")]
    EmptyClass(usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("index {index} out of range for {len} entries")]
    Index { index: usize, len: usize },
    #[error("lambda_roi must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error("representation norm {0:e} is too small for similarity mapping")]
    DegenerateRepresentation(f64),
    #[error("similarity map maximum {0} is not positive")]
    DegenerateMap(f64),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("component has no pixels")]
    EmptyComponent,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown sample id {0}")]
    UnknownId(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
