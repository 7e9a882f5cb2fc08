use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("non-finite coordinate at point {0}")]
    NonFiniteCoordinate(usize),

    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("requested {requested} neighbors but only {available} points are indexed")]
    TooManyNeighbors { requested: usize, available: usize },

    #[error("budget {budget} outside 1..={available}")]
    InvalidBudget { budget: usize, available: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFiniteTensor(&'static str),

    #[error("training diverged at epoch {epoch}, pair {pair}: {detail}")]
    Divergence {
        epoch: usize,
        pair: usize,
        detail: String,
    },

    #[error("{path}: parse error at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
