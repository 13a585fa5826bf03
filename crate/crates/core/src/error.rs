use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two lengths or tensor shapes that must agree do not.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was invoked on state it cannot use (e.g. an inference cache passed to backward).
    #[error("state error: {0}")]
    State(String),

    /// Train/test subjects overlap.
    #[error("protocol violation: subjects {subjects:?} appear in both splits")]
    SubjectOverlap { subjects: Vec<u32> },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {kind}", path.display())]
    Format { path: PathBuf, kind: FormatError },

    #[error("architecture mismatch at `{key}`: {detail}")]
    ArchitectureMismatch { key: String, detail: String },
}

/// Reasons a binary container (clip or checkpoint) is rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated at byte offset {offset}: need {needed} bytes, file has {available}")]
    Truncated {
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed content at byte offset {offset}: {detail}")]
    Malformed { offset: u64, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, kind: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            kind,
        }
    }
}
