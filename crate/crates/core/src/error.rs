use std::io;

use thiserror::Error;
use transdae_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// Invalid hyperparameters or incompatible input geometry.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A sublayer failed; `path` names where in the network.
    #[error("{path}: {source}")]
    At { path: String, source: Box<Error> },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated data: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Innermost error, skipping path annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::At { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            Error::Numeric(_) | Error::Tensor(TensorError::Numeric(_))
        )
    }

    /// Process exit code used by the command-line tool: 2 for numeric
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_numeric() {
            2
        } else {
            1
        }
    }
}

pub(crate) trait Context<T> {
    fn at(self, path: impl Into<String>) -> Result<T>;
}

impl<T, E: Into<Error>> Context<T> for std::result::Result<T, E> {
    fn at(self, path: impl Into<String>) -> Result<T> {
        self.map_err(|e| Error::At {
            path: path.into(),
            source: Box::new(e.into()),
        })
    }
}
