use std::path::PathBuf;

use reviewkd_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stage {stage} out of range 1..={stages}")]
    StageOutOfRange { stage: usize, stages: usize },
    #[error("stage count mismatch: student has {student}, teacher has {teacher}")]
    StageCount { student: usize, teacher: usize },
    #[error("expected {expected} fusers, got {got}")]
    FuserCount { expected: usize, got: usize },
    #[error("no transform registered for student stage {student} -> teacher stage {teacher}")]
    MissingTransform { student: usize, teacher: usize },
    #[error("unknown architecture {0:?}")]
    UnknownArch(String),
    #[error("non-finite {what} ({value}) at epoch {epoch}")]
    Divergence {
        what: &'static str,
        value: f64,
        epoch: usize,
    },
    #[error("dataset error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("unsupported report format {0:?}")]
    UnsupportedFormat(String),
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
