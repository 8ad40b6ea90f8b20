use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// A hard sample sits exactly on top of the query, so the distance
    /// gradient is undefined there.
    #[error("degenerate geometry: hard sample {index} coincides with the query")]
    DegenerateGeometry { index: usize },

    /// The labeled key set contains no negatives (cold start with a tiny
    /// dictionary).
    #[error("no negative keys available for the query")]
    NoNegatives,

    #[error("value {value} outside the domain of {what}")]
    OutOfDomain { what: &'static str, value: f64 },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed file: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
