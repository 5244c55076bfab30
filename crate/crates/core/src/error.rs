use std::path::PathBuf;

use cms_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what}: bad magic {found:?}")]
    BadMagic { what: &'static str, found: [u8; 4] },

    #[error("{what}: unsupported version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{what}: truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
    },

    #[error("{what}: malformed at byte offset {offset}: {msg}")]
    Malformed {
        what: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("checkpoint does not match model topology at parameter {name}: {msg}")]
    Topology { name: String, msg: String },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("index {index} out of range (dataset holds {len} sequences)")]
    IndexOutOfRange { index: usize, len: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the command line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config { .. } | Error::Invalid(_) => "config",
            Error::Io { .. } => "io",
            Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Truncated { .. }
            | Error::Malformed { .. } => "format",
            Error::Topology { .. } => "topology",
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => "numeric",
            Error::IndexOutOfRange { .. } => "range",
        }
    }
}
