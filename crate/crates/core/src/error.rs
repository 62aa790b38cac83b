//! Error type shared across the crate.

use std::fmt;
use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by this crate.
///
/// Numerical routines return `NonFinite` instead of propagating NaN or Inf;
/// every public operation that produces a tensor checks its output.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes or volume grids do not line up.
    ShapeMismatch(String),
    /// A NaN or Inf was produced or supplied.
    NonFinite(String),
    /// A network or layer specification is internally inconsistent.
    InvalidSpec(String),
    /// A function argument is outside its documented domain.
    InvalidArgument(String),
    /// A checkpoint file is truncated, misordered, or has a bad digest.
    CorruptCheckpoint(String),
    /// A checkpoint was written for a different network specification.
    SpecMismatch(String),
    /// An input data file (image, IDX archive) cannot be decoded.
    CorruptFile(String),
    /// Paired data sources disagree on record counts.
    CountMismatch(String),
    /// An image with zero pixels was supplied.
    EmptyImage,
    /// A dataset with zero samples was supplied.
    EmptyDataset,
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::InvalidSpec(msg) => write!(f, "invalid spec: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::CorruptCheckpoint(msg) => write!(f, "corrupt checkpoint: {msg}"),
            Error::SpecMismatch(msg) => write!(f, "spec mismatch: {msg}"),
            Error::CorruptFile(msg) => write!(f, "corrupt file: {msg}"),
            Error::CountMismatch(msg) => write!(f, "count mismatch: {msg}"),
            Error::EmptyImage => write!(f, "empty image"),
            Error::EmptyDataset => write!(f, "empty dataset"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}
