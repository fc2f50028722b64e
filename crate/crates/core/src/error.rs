use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported audio encoding: {0}")]
    UnsupportedFormat(String),
    #[error("audio buffer is empty")]
    EmptyAudio,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("filter diverged at step {step}: covariance not positive definite after jitter escalation")]
    Divergence { step: usize },
    #[error("filter diverged at step {step} under the initial parameters; try a longer lengthscale, a larger noise variance or fewer history lags")]
    InitialDivergence { step: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("model trajectory became non-finite at step {step}; parameters are unstable")]
    Unstable { step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
