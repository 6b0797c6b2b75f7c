use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Input vectors are (near) parallel or (near) zero.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    /// The caller broke a sequencing contract (e.g. backward without a matching forward).
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("optimization diverged at step {step} in parameter class `{class}`: {detail}")]
    Divergence {
        step: usize,
        class: String,
        detail: String,
    },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("view sampling failed: {0}")]
    Sampling(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
