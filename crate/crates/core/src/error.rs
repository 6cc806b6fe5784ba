use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("division error: {0}")]
    Division(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
