use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },

    #[error("invalid shape {shape}: {reason}")]
    InvalidShape { shape: Shape, reason: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),

    #[error("image decode error in {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training step aborted: {0}")]
    StepAborted(String),
}

impl Error {
    pub(crate) fn in_layer(self, layer: &str) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error was caused by caller input (bad file, bad shape,
    /// bad config) rather than an internal fault.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Layer { source, .. } => source.is_user_error(),
            Error::NonFinite { .. } | Error::StepAborted(_) => false,
            _ => true,
        }
    }
}
