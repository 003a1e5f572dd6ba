use std::fmt;

/// Errors raised by the tensor engine, the model components and the harness.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not agree.
    Shape { op: &'static str, detail: String },
    /// A NaN or infinity appeared in the output of an operation.
    NonFinite { op: &'static str },
    /// A precondition of an operation was violated by the caller.
    Contract(String),
    /// Bad user input (state values, ids, CSV rows).
    Input(String),
    /// Configuration file or wiring problem.
    Config(String),
    /// Malformed tensor or checkpoint file.
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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
