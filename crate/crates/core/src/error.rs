use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty instruction")]
    EmptyInstruction,

    #[error("no features captured")]
    NoFeatures,

    #[error("no attention maps captured")]
    NoAttention,

    #[error("no related tokens")]
    NoRelatedTokens,

    #[error("no related tokens to receive mass")]
    AllTokensRegularized,

    #[error(
        "localization impossible: instruction has no related tokens and no external mask was given"
    )]
    LocalizationImpossible,

    #[error("cluster count {k} exceeds number of points {points}")]
    TooManyClusters { k: usize, points: usize },

    #[error("cosine undefined: feature vector at index {0} has zero norm")]
    CosineUndefined(usize),

    #[error("empty point set")]
    EmptyPoints,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
