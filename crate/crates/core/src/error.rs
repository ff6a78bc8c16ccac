use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("gradient check unreliable: {0}")]
    UnreliableCheck(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint config mismatch in fields: {}", .fields.join(", "))]
    ConfigMismatch { fields: Vec<String> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step} (lr {lr:e}, max |grad| {max_grad:e})")]
    Diverged { step: usize, lr: f64, max_grad: f64 },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
