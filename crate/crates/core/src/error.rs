use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller handed an operator something outside its contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite gradient in `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("weight file: {msg} at byte offset {offset}")]
    Format { offset: u64, msg: String },

    #[error("weight file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-parsable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::NonFiniteGradient { .. } => "training",
            Error::UnknownParam(_) => "unknown_param",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}
