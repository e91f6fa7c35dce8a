//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor, vector, or grid dimensions disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A class id was registered twice on a segmentation head.
    #[error("registration error: class {0} is already registered")]
    Registration(u32),

    /// Non-finite loss or gradient.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An iterative solver stopped before reaching its tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    /// A manifest entry could not be turned into a valid task.
    #[error("ingestion error at {entry}: {reason}")]
    Ingestion { entry: String, reason: String },

    /// Hooks were invoked in an order the strategy does not allow.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Operation is undefined for the scenario at hand.
    #[error("scenario error: {0}")]
    Scenario(String),

    /// A ratio metric hit a diagonal/reference value at or below the guard.
    #[error("degenerate denominator: {0}")]
    Degenerate(String),

    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 for
    /// configuration-class problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Registration(_)
            | Error::Ingestion { .. }
            | Error::Scenario(_)
            | Error::Aggregation(_) => 2,
            _ => 3,
        }
    }
}
