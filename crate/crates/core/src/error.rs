use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("protocol error (code {code:#04x}): {message}")]
    Protocol { code: u8, message: String },

    #[error("step {step} (t={t}){}: {source}", layer.map(|l| format!(", layer {l}")).unwrap_or_default())]
    AtStep {
        step: usize,
        t: usize,
        layer: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Wrap an error with the sampling step that produced it.
    pub fn at_step(self, step: usize, t: usize, layer: Option<usize>) -> Self {
        Error::AtStep {
            step,
            t,
            layer,
            source: Box::new(self),
        }
    }

    /// The innermost error, with step context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}
