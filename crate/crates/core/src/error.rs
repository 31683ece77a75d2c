use std::fmt;
use std::path::Path;

/// Error type shared across the workbench.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    Dim(String),
    /// Invalid configuration value (attack knobs, training hyperparameters, CLI config).
    Config(String),
    /// API contract violation (e.g. backward on a non-scalar).
    Contract(String),
    /// Numerical failure: NaN/Inf loss or gradient, divergence.
    Numeric(String),
    /// Malformed file: bad magic, unsupported version, checksum mismatch.
    Format(String),
    /// Inconsistent data: image/label count mismatch, architecture mismatch.
    Mismatch(String),
    /// Underlying I/O failure, annotated with the path involved.
    Io(String, std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, err: std::io::Error) -> Error {
        Error::Io(path.display().to_string(), err)
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Mismatch(m) => write!(f, "mismatch error: {m}"),
            Error::Io(path, e) => write!(f, "i/o error on {path}: {e}"),
        }
    }
}

impl std::error::Error for Error {}
