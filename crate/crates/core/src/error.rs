use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the mathematical domain of a function.
    #[error("domain error in {function}: {message}")]
    Domain {
        function: &'static str,
        message: String,
    },

    /// Matrix/vector dimensions do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input data failed validation (bad values, duplicate ids, rank deficiency).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A numerical routine failed to produce a finite, converged result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Failure reading or writing a data file.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(function: &'static str, message: impl Into<String>) -> Self {
        Error::Domain {
            function,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
