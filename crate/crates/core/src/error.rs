use std::path::PathBuf;

use gradkit::GradError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] GradError),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("corrupted checkpoint: {0}")]
    Corrupt(String),

    #[error("incompatible checkpoint: array `{name}` {detail}")]
    Incompatible { name: String, detail: String },

    #[error("poisoned gradient: non-finite value in `{0}`")]
    PoisonedGradient(String),

    #[error("variant `{variant}` does not support {what}")]
    Unsupported { variant: String, what: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
