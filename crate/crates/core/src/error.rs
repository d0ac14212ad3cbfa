use thiserror::Error;

/// Every failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data generation failed at sample {index}: {reason}")]
    DataGeneration { index: usize, reason: String },

    #[error("training failed: {0}")]
    Training(String),

    #[error("synthesis failed: {0}")]
    Synthesis(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("simulation aborted at step {step}: {reason}")]
    Simulation { step: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed artifact: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
