use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("head ({row}, {col}) lies outside a {height}x{width} grid")]
    HeadOutOfBounds {
        row: f64,
        col: f64,
        height: usize,
        width: usize,
    },

    #[error("label mask selects no cells")]
    EmptyMask,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("selection count {requested} out of range 1..={available}")]
    SelectionOutOfRange { requested: usize, available: usize },

    #[error("{points} points cannot support {components} mixture components")]
    TooFewPoints { points: usize, components: usize },

    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("backward called without a cached forward pass")]
    MissingForward,

    #[error("training diverged at epoch {epoch}, scene {scene}: loss = {loss}")]
    Diverged { epoch: usize, scene: usize, loss: f64 },

    #[error("unknown ablation '{0}'")]
    UnknownAblation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
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
