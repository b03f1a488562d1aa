use thiserror::Error;

/// Errors produced by the inference engine and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    Network(String),

    #[error("invalid path for {origin}->{destination}: {message}")]
    Path {
        origin: String,
        destination: String,
        message: String,
    },

    #[error("no feasible path between {origin} and {destination}")]
    Disconnected { origin: String, destination: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is not positive definite (jitter reached cap {cap:e})")]
    NotPositiveDefinite { cap: f64 },

    #[error("{0}")]
    Empty(String),

    #[error("{file}: row {row}: {message}")]
    Row {
        file: String,
        row: usize,
        message: String,
    },

    #[error("input validation failed: {0}")]
    Validation(String),

    #[error("{path}: {message}")]
    Schema { path: String, message: String },

    #[error("sampler aborted at iteration {iteration} in block {block}: {message}")]
    Aborted {
        iteration: usize,
        block: String,
        message: String,
        checkpoint: Option<Box<crate::gibbs::ModelState>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error categories, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Numerical,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Network(_)
            | Error::Path { .. }
            | Error::Disconnected { .. }
            | Error::Dimension(_)
            | Error::Parameter(_)
            | Error::Empty(_)
            | Error::Row { .. }
            | Error::Validation(_)
            | Error::Schema { .. } => ErrorCategory::Input,
            Error::NotPositiveDefinite { .. } | Error::Aborted { .. } => ErrorCategory::Numerical,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
