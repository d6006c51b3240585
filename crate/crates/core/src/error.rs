use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported capability: {0}")]
    Unsupported(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("training diverged at step {step}: {loss} = {value} (last good checkpoint: {checkpoint})")]
    Diverged {
        step: usize,
        loss: String,
        value: f64,
        checkpoint: String,
    },

    #[error("oracle accuracy {accuracy:.4} is below the required floor {floor:.4}")]
    OracleBelowFloor { accuracy: f64, floor: f64 },

    #[error("manifest {path}: bad field `{field}`: {reason}")]
    Manifest {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl std::fmt::Display) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
