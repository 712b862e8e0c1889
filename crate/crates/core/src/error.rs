use std::path::PathBuf;

use crate::sparse::Coord4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("feature width mismatch: expected {expected}, found {found}")]
    WidthMismatch { expected: usize, found: usize },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("stride mismatch: {0}")]
    StrideMismatch(String),

    #[error("coordinate sets differ, first offending coordinate {0:?}")]
    CoordinateMismatch(Coord4),

    #[error("duplicate coordinate {0:?}")]
    DuplicateCoordinate(Coord4),

    #[error("coordinate {coord:?} is not aligned to stride {stride:?}")]
    MisalignedCoordinate { coord: Coord4, stride: [i32; 4] },

    #[error("malformed file {path}: {message} (at {position})")]
    Malformed {
        path: PathBuf,
        position: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown class name {name:?}, allowed: {allowed}")]
    UnknownClass { name: String, allowed: String },

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("numerical failure at step {step}: {detail}")]
    NumericalFailure { step: usize, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(
        path: impl Into<PathBuf>,
        position: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Malformed {
            path: path.into(),
            position: position.into(),
            message: message.into(),
        }
    }
}
