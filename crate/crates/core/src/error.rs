use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("pose ({x:.3}, {y:.3}) lies outside the world")]
    OutOfBounds { x: f64, y: f64 },

    #[error("sensor streams have no overlapping time interval")]
    NoOverlap,

    #[error("table has {rows} rows, window needs {window}")]
    TooShort { rows: usize, window: usize },

    #[error("degenerate vector (norm below {0:e})")]
    DegenerateVector(f64),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid edge between {a:?} and {b:?}")]
    InvalidEdge {
        a: (usize, usize),
        b: (usize, usize),
    },

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("missing artifact {path}: run `trav {producer}` first")]
    MissingArtifact {
        path: PathBuf,
        producer: &'static str,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
