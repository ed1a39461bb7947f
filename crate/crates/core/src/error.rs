use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the toolkit.
///
/// The variants map onto the error classes callers need to distinguish:
/// shape problems, numeric failures, bad arguments, invalid approximation
/// plans, file-format violations and plain I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Parse failures for the on-disk formats (tensor containers and IDX files).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("missing weight {0:?}")]
    MissingWeight(String),
    #[error("shape mismatch for {name:?}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("overlapping tensors {first:?} and {second:?}")]
    Overlap { first: String, second: String },
    #[error("unsupported dtype {dtype:?} for {name:?}")]
    Dtype { name: String, dtype: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure_dim {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Dimension(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure_dim;
