use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector or matrix lengths do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A computation produced a non-finite or otherwise invalid number.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Inputs that carry no usable signal (zero power and the like).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed file contents. `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage was invoked before the stage it depends on.
    #[error("ordering error: `{stage}` needs the output of `{missing}` at {} (run `{missing}` first)", path.display())]
    Ordering {
        stage: String,
        missing: String,
        path: PathBuf,
    },

    #[error("refusing to overwrite {} (pass --force)", .0.display())]
    Exists(PathBuf),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

/// Checks that two slices have equal length.
pub(crate) fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: length {a} vs {b}")));
    }
    Ok(())
}
