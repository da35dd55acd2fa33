use std::io;
use std::path::{Path, PathBuf};

use allost_core::bleu::BleuError;
use allost_core::bpe::BpeError;
use allost_core::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure maps to one of three exit classes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 config, 3 data (IO included), 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::Io { .. } => "data",
            Error::Numeric(_) => "numeric",
        }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Config(_) | TensorError::Shape { .. } | TensorError::DataLength { .. } => {
                Error::Config(e.to_string())
            }
            TensorError::Index { .. } => Error::Data(e.to_string()),
            _ => Error::Numeric(e.to_string()),
        }
    }
}

impl From<BpeError> for Error {
    fn from(e: BpeError) -> Self {
        match e {
            BpeError::VocabTooSmall { .. } | BpeError::Dropout(_) => Error::Config(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<BleuError> for Error {
    fn from(e: BleuError) -> Self {
        Error::Data(e.to_string())
    }
}

/// Attaches a path to IO results.
pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
