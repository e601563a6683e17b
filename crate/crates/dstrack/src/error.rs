use std::path::PathBuf;

/// Crate-wide error type. Shape mismatches in the numeric core are
/// programming errors and panic instead.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("dialog {dialog_id}: {msg}")]
    Data { dialog_id: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn data(dialog_id: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data {
            dialog_id: dialog_id.into(),
            msg: msg.into(),
        }
    }

    /// Exit code for the CLI: usage and configuration problems are 2,
    /// everything else is a runtime failure (1).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
