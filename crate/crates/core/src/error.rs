use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: width mismatch (expected {expected}, got {got})")]
    WidthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("point {index} at ({x}, {y}, {z}) lies outside the grid bounds")]
    OutOfBounds { index: usize, x: f64, y: f64, z: f64 },

    #[error("nearest-neighbour base set is empty")]
    EmptyBase,

    #[error("pillars {0} and {1} share a BEV cell")]
    DuplicateCoords(usize, usize),

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("could not place {objects} non-overlapping boxes after {attempts} attempts")]
    Placement { objects: usize, attempts: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
