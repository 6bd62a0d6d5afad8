use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("value {value} is outside the encodable range (|r| < {limit})")]
    Range { value: f64, limit: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("reconstruction failed: {0}")]
    Reconstruction(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("correlated randomness {id} was already consumed")]
    MaterialReuse { id: u64 },

    #[error("correlated randomness pool exhausted: {0}")]
    PoolExhausted(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("protocol abort: {0}")]
    Abort(String),

    #[error("deadlock: every live party is waiting ({0})")]
    Deadlock(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures raised while a protocol was running (as opposed to
    /// setup or configuration problems).
    pub fn is_abort(&self) -> bool {
        matches!(
            self,
            Error::Abort(_)
                | Error::Deadlock(_)
                | Error::Protocol(_)
                | Error::MaterialReuse { .. }
                | Error::PoolExhausted(_)
                | Error::Reconstruction(_)
        )
    }
}
