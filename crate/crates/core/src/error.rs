use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the anomaly-detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, modes or hyperparameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Data that violates an operation's precondition (non-finite values,
    /// anomalous samples in a training split, indivisible image sizes).
    #[error("input error: {0}")]
    Input(String),

    /// Broken internal invariant, e.g. an out-of-range codebook index.
    #[error("internal error: {0}")]
    Internal(String),

    /// A metric that is not defined for the given labels.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
