use std::path::PathBuf;

use brivl_tensor::TensorError;
use thiserror::Error;

/// What went wrong while decoding a binary file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatFault {
    BadMagic,
    Version,
    Truncated,
    Checksum,
    Corrupt,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: {fault:?} at byte offset {offset}: {detail}")]
    Format {
        what: &'static str,
        fault: FormatFault,
        offset: u64,
        detail: String,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    /// Process exit code: 1 usage/config, 2 data or file format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 2,
            Error::Numerical(_) | Error::Tensor(_) => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
