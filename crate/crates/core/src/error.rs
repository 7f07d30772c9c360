use thiserror::Error;

/// Coarse classification of failures, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Convergence,
    Singularity,
    Config,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("input error: column {column} ({name}) has zero variance")]
    ZeroVariance { column: usize, name: String },

    #[error("input error: non-numeric value {value:?} at row {row}, column {column} ({name})")]
    NonNumeric {
        row: usize,
        column: usize,
        name: String,
        value: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Input(_)
            | Error::ZeroVariance { .. }
            | Error::NonNumeric { .. }
            | Error::Shape(_)
            | Error::Io(_) => ErrorKind::Input,
            Error::Singular(_) => ErrorKind::Singularity,
            Error::Convergence(_) => ErrorKind::Convergence,
            Error::Config(_) => ErrorKind::Config,
            Error::Numerical(_) => ErrorKind::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
