use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its mathematical domain (non-positive time
    /// constant, label out of range, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector or matrix dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration is structurally invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An engine was driven outside its contract (wrong store variant,
    /// missing trajectory, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A locking loss was requested from a purely online execution mode.
    #[error("locking error: {0}")]
    Locking(String),

    /// A persisted artifact is malformed or has an unsupported version.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
