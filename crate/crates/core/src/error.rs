use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DatError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("format error in {path} at byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("invalid session data: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DatError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DatError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by numbers going bad rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, DatError::NonFinite { .. } | DatError::Numeric(_))
    }

    /// True for errors caused by malformed files or session contents.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            DatError::Format { .. } | DatError::Data(_) | DatError::Io { .. } | DatError::Json(_)
        )
    }
}
