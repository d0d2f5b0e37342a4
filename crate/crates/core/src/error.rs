use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error: {0}")]
    Image(String),
    #[error("unsupported media: {0}")]
    Unsupported(String),
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("non-differentiable point reached in {0}")]
    NonDifferentiable(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("value {value} outside entropy model support [{low}, {high}]")]
    OutOfSupport { value: f64, low: f64, high: f64 },
    #[error("range decoder: {0}")]
    Decode(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    Version(u8),
    #[error("checksum mismatch in {0}")]
    Checksum(&'static str),
    #[error("model hash mismatch: container expects {expected:016x}, model is {actual:016x}")]
    ModelHash { expected: u64, actual: u64 },
    #[error("training diverged at iteration {iter}")]
    Diverged { iter: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
