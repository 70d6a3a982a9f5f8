use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LgdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LgdError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("invalid stain matrix: {0}")]
    InvalidStainMatrix(String),

    #[error("label {0} is outside 0..=3")]
    InvalidLabel(usize),

    #[error("teacher encoder is not pretrained: {0}")]
    NotPretrained(String),

    #[error("inconsistent variant: {0}")]
    InconsistentVariant(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl LgdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LgdError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        LgdError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
