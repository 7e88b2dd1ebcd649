use std::fmt;

/// Error categories surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unsupported head: {0}")]
    UnsupportedHead(String),
    #[error("empty index")]
    EmptyIndex,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse class of an [`Error`], used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Shape,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidInput(_) | Error::Config(_) | Error::UnsupportedHead(_) => {
                ErrorCategory::Config
            }
            Error::Io(_) | Error::NotFound(_) => ErrorCategory::Io,
            Error::Shape(_) | Error::LayoutMismatch(_) | Error::Format(_) | Error::EmptyIndex => {
                ErrorCategory::Shape
            }
            Error::Numerical(_) => ErrorCategory::Numerical,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::Shape => "shape",
            ErrorCategory::Numerical => "numerical",
        };
        f.write_str(s)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
