use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(
        "target disparity {target:.4} is infeasible; the closest achievable disparity is {achievable:.4}"
    )]
    InfeasibleDisparity { target: f64, achievable: f64 },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("training diverged in {stage} (fold {fold}, epoch {epoch}): {detail}")]
    Divergence {
        stage: String,
        fold: usize,
        epoch: usize,
        detail: String,
    },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } => 4,
            Error::Fold { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
