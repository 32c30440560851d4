//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensor shapes that must agree do not.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument violates an operation's precondition.
    #[error("{0}")]
    InvalidArgument(String),

    /// Dataset-level problems (empty root, malformed layout, bad split).
    #[error("{0}")]
    Data(String),

    /// A file in the dataset tree is not a supported image format.
    #[error("unsupported file {path}: {reason}")]
    UnsupportedFile { path: PathBuf, reason: String },

    /// An image file exists but cannot be decoded.
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("bad magic: expected \"FPNT\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    /// Checkpoint format version is not supported.
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    /// Checkpoint file ended before the declared contents.
    #[error("truncated checkpoint: {context}")]
    Truncated { context: String },

    /// A checkpoint tensor disagrees with the shape implied by its metadata.
    #[error("checkpoint shape inconsistency for \"{name}\": expected {expected:?}, found {found:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Run-config file problems (unknown key, bad value).
    #[error("config error: {0}")]
    Config(String),

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
