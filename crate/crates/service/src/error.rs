use std::path::PathBuf;

use echoguide_core::protocol::ErrorCode;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] echoguide_core::Error),

    #[error(transparent)]
    Nn(#[from] echoguide_nn::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("session error: {0}")]
    Session(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wire error code for a failure while processing a frame.
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::Nn(echoguide_nn::Error::Shape(_))
            | Error::Core(echoguide_core::Error::Shape(_))
            | Error::Nn(echoguide_nn::Error::Core(echoguide_core::Error::Shape(_))) => ErrorCode::ShapeMismatch,
            _ => ErrorCode::Internal,
        }
    }
}
