use std::path::PathBuf;

/// Errors produced by the detection toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scene {scene_id}: {message}")]
    InvalidScene { scene_id: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },
    #[error("tape does not belong to this network")]
    StaleTape,
    #[error("non-finite {what} at {location}")]
    NonFinite { what: &'static str, location: String },
    #[error("too many nodes for exact inference: {0} > {max}", max = crate::inference::MAX_NODES)]
    TooManyNodes(usize),
    #[error("k-means needs at least {k} distinct points, got {distinct}")]
    TooFewPoints { k: usize, distinct: usize },
    #[error("gradient check could not find a smooth point after {0} attempts")]
    PersistentKink(usize),
    #[error("evaluation needs at least one non-difficult ground truth")]
    NoPositives,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("model file: {0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
