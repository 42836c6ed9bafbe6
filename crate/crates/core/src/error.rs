use std::path::PathBuf;

use crate::dataio::VolumeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error. The variants map onto the CLI exit-code classes:
/// data problems, numeric failures and configuration mistakes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("volume {path}: {source}")]
    Volume {
        path: PathBuf,
        #[source]
        source: VolumeError,
    },

    #[error("checkpoint {path}: {message} (at byte offset {offset})")]
    Checkpoint {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
