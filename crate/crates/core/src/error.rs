use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the glyph pipeline.
///
/// The variants line up with the process exit codes used by the CLI:
/// validation problems, I/O problems, on-disk format problems and numerical
/// failures during optimisation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Numerical,
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Wraps `self` with a human-readable context prefix.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Validation(_) | Error::Format { .. } => ErrorClass::Validation,
            Error::Io { .. } | Error::Image { .. } => ErrorClass::Io,
            Error::Numerical(_) => ErrorClass::Numerical,
            Error::Context { source, .. } => source.class(),
        }
    }
}
