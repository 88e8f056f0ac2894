use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("value `{value}` is not in the vocabulary of `{feature}`")]
    Vocabulary { feature: String, value: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(
        "non-finite loss at step {step} (epoch {epoch}, lr {lr}): clip={clip} ce_image={ce_image} ce_text={ce_text}"
    )]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        lr: f64,
        clip: f64,
        ce_image: f64,
        ce_text: f64,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
