use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("array file does not start with PCT1 magic")]
    BadMagic,

    #[error("array file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("conjugate gradient breakdown at iteration {iter}: curvature {curvature:e}")]
    CgBreakdown { iter: usize, curvature: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
