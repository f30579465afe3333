use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum NpnError {
    /// Shapes or layer settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called out of order or with inconsistent arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed input file.
    #[error("parse error in {path} at byte offset {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Training produced a non-finite loss or gradient.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NpnError> = std::result::Result<T, E>;

impl NpnError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        NpnError::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        NpnError::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NpnError::Io {
            path: path.into(),
            source,
        }
    }
}
