use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or image sizes disagree with what an operation needs.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An API was called outside its contract (bad range, non-scalar backward, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A value became NaN or infinite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input data (manifests, records) failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration file or combination of settings is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// A retrieval protocol produced an empty query or gallery set.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Checkpoint container could not be decoded.
    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Validation(_)
            | Error::Protocol(_)
            | Error::Dimension(_)
            | Error::Format(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
