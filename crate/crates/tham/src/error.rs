//! Error type shared across the crate.
//!
//! Variants are grouped by how the command-line tool reports them:
//! configuration and schema problems exit with 2, numeric failures with 3,
//! and I/O problems with 4.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Bad configuration value, unknown key, or inconsistent dimensions.
    #[error("config: {0}")]
    Config(String),

    /// Malformed input data (JSONL, CSV, ontology edge list, checkpoint).
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Shape mismatch inside a tensor operation.
    #[error("shape mismatch in {op}: ({0} x {1}) vs ({2} x {3})", lhs.0, lhs.1, rhs.0, rhs.1)]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// Index out of range inside a tensor operation.
    #[error("index out of range in {op}: {index} >= {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    /// Non-finite value or an otherwise impossible numeric state.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                _ => unreachable!("is_io_error() guaranteed the Io kind"),
            }
        } else {
            Error::Config(format!("csv: {e}"))
        }
    }
}

impl Error {
    pub fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape { op, lhs, rhs }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Shape { .. } | Error::Index { .. } => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
        }
    }
}
