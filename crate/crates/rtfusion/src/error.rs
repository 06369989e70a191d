use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit-code contract: usage problems exit 1,
/// data/format problems exit 2, numerical failures exit 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor operation received incompatible shapes. The message names
    /// the operation and the offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed or truncated file content.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A non-finite value or other numerical failure was detected.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl std::fmt::Display, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::ShapeMismatch { .. } | Error::Format { .. } | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}
