use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}:{line}: field `{field}`: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        field: &'static str,
        reason: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Manifest { .. } | Error::Io { .. } => 3,
            Error::Shape { .. } | Error::Numeric(_) => 4,
        }
    }

    /// Short machine-readable category, paired with `exit_code`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::Manifest { .. } | Error::Io { .. } => "data",
            Error::Shape { .. } => "shape",
            Error::Numeric(_) => "numeric",
        }
    }
}
