use std::path::PathBuf;

/// Unified error type for the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument is out of its documented domain (negative probability,
    /// zero batch size, even kernel with same-padding, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A group element index is not in `0..order`.
    #[error("group element {index} out of range for group of order {order}")]
    GroupIndex { index: usize, order: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A tensor file failed header or length validation.
    #[error("bad tensor file {path}: {reason}")]
    TensorFile { path: PathBuf, reason: String },

    /// A dataset file (idx or amat) failed validation.
    #[error("bad dataset file {path}: {reason}")]
    DataFile { path: PathBuf, reason: String },

    /// Loss became non-finite during training.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A checkpoint directory is missing pieces or inconsistent.
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn data_file(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::DataFile { path: path.into(), reason: reason.into() }
    }
}
