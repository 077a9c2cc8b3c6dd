use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
