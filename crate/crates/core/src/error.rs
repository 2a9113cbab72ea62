use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tessellation: {0}")]
    InvalidTessellation(String),

    #[error("zero-boundary basis needs at least 2 cells, got {0}")]
    DegenerateBasis(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("point {x} lies outside the domain [{a}, {b}]")]
    OutsideDomain { x: f64, a: f64, b: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("cell-hop bound of {bound} exceeded while integrating from x={x}")]
    HopLimit { bound: usize, x: f64 },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("invalid activation config: {0}")]
    InvalidConfig(String),

    #[error("lookup table is stale (table version {table}, parameters version {params})")]
    StaleLut { table: u64, params: u64 },

    #[error("lookup table is frozen for inference and has no gradients")]
    FrozenLut,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("backward called without a forward cache")]
    MissingCache,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{0}")]
    Data(String),

    #[error("all runs diverged")]
    AllDiverged,

    #[error("io error on {path}: {source}")]
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

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
