//! Error type shared by all modules.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the engine.
///
/// Variants are grouped so a caller can map them onto coarse failure
/// classes: I/O, file format, shape arithmetic, and numeric validity.
#[derive(Debug)]
pub enum Error {
    /// Underlying file or stream failure.
    Io(std::io::Error),
    /// A manifest, tensor file, or other input could not be parsed.
    Parse(String),
    /// A file declares a format version this build does not support.
    Version { found: u32, supported: u32 },
    /// Tensor or layer shapes are incompatible.
    Shape(String),
    /// A weighted layer has no entry in the weight index.
    MissingWeight(String),
    /// The weight index names a tensor no layer declares.
    UnexpectedWeight(String),
    /// An argument is outside its documented domain.
    InvalidArgument(String),
    /// A computation produced or received a non-finite or degenerate value.
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Version { found, supported } => {
                write!(f, "unsupported format version {found} (supported: {supported})")
            }
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::MissingWeight(msg) => write!(f, "missing weight tensor: {msg}"),
            Error::UnexpectedWeight(msg) => write!(f, "unexpected weight tensor: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
