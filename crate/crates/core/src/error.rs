use std::path::PathBuf;

use crate::guidance::GuidanceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mesh is empty")]
    EmptyMesh,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error("guidance failed: {0}")]
    Guidance(#[from] GuidanceError),

    #[error("non-finite value encountered in {context} at step {step}")]
    NonFinite { context: String, step: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, msg: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.to_string(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Parse { .. } => 3,
            Error::Guidance(_) => 4,
            Error::NonFinite { .. } => 5,
            Error::InvalidArgument(_) | Error::DimensionMismatch(_) | Error::EmptyMesh => 1,
        }
    }
}
