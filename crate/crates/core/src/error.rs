use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or malformed image: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask has no foreground pixels")]
    EmptyRegion,

    #[error("cortex ring at level {level} is empty")]
    EmptyRing { level: usize },

    #[error("seed ({x}, {y}) lies outside the {width}x{height} image")]
    SeedOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error(
        "could not place {requested} seeds under the spacing constraints (placed {placed} after {attempts} attempts)"
    )]
    Infeasible {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("proposals: {0}")]
    Proposals(String),

    #[error("empty dataset")]
    EmptyDataset,

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
