use std::io;

/// Errors surfaced by the library and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed data that violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Configuration is malformed or out of range.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was invoked in the wrong state (missing anchor, checkpoint, ...).
    #[error("state error: {0}")]
    State(String),

    /// A gradient or update produced NaN/inf.
    #[error("non-finite gradient: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
