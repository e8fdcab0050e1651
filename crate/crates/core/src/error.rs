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

    #[error("parse error: {0}")]
    Parse(String),

    #[error("malformed annotation for clip {clip_id} frame {frame}: {detail}")]
    MalformedAnnotation {
        clip_id: String,
        frame: usize,
        detail: String,
    },

    #[error("duplicate landmark {landmark} for clip {clip_id} frame {frame}")]
    DuplicateLandmark {
        clip_id: String,
        frame: usize,
        landmark: String,
    },

    #[error("sweep {sweep_id}: {detail}")]
    InvalidSweep { sweep_id: String, detail: String },

    #[error("sweep {sweep_id} frame {frame}: labeled {labeled} but rubric deductions give {expected}")]
    InconsistentCategory {
        sweep_id: String,
        frame: usize,
        labeled: String,
        expected: String,
    },

    #[error("insufficient subjects: need at least {needed}, got {got}")]
    InsufficientSubjects { needed: usize, got: usize },

    #[error("invalid rubric criteria: {0}")]
    InvalidCriteria(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("empty evaluation: {0}")]
    EmptyEvaluation(String),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
