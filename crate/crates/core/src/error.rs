use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Row {
        file: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{file}: {message}")]
    File { file: PathBuf, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation at timestep {timestep}")]
    NonFiniteActivation { timestep: usize },

    #[error("non-finite gradient; update not applied")]
    NonFiniteGradient,

    #[error("training diverged at epoch {epoch}, iteration {iteration}")]
    Diverged { epoch: usize, iteration: usize },

    #[error("no basin has an admissible training window of length {0}")]
    NoAdmissibleWindow(usize),

    #[error("every element is masked")]
    AllMasked,

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("unknown composition {0:?}")]
    UnknownComposition(String),

    #[error("unknown basin {0:?}")]
    UnknownBasin(String),

    #[error("experiment {name} failed: {message}")]
    ExperimentFailed { name: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
