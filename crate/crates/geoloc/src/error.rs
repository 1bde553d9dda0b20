//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

/// All fallible operations in this crate return this error.
///
/// Variants are grouped by how the CLI reports them: usage problems exit 1,
/// bad input data exits 2, violated internal invariants exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid arguments, flags, or configuration values.
    #[error("{0}")]
    Usage(String),

    /// Shape disagreement between tensors in an op.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Malformed or out-of-domain input data (no file position available).
    #[error("{0}")]
    Data(String),

    /// Malformed record in a line- or row-oriented input file.
    #[error("{path}:{line}: {detail}")]
    Record {
        path: String,
        line: usize,
        detail: String,
    },

    /// Filesystem failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A condition the library guarantees never happens on valid inputs.
    #[error("internal: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn record(
        path: impl AsRef<std::path::Path>,
        line: usize,
        detail: impl Into<String>,
    ) -> Self {
        Error::Record {
            path: path.as_ref().display().to_string(),
            line,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Record { .. } | Error::Io { .. } => 2,
            Error::Shape { .. } | Error::Internal(_) => 3,
        }
    }
}
