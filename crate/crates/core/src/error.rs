use thiserror::Error;

#[derive(Debug, Error)]
pub enum IwolError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}; minibatch dumped to {dump}")]
    NonFiniteLoss { iteration: usize, dump: String },

    #[error(transparent)]
    Neural(#[from] iwol_neural::NeuralError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IwolError>;

pub(crate) fn contract(msg: impl Into<String>) -> IwolError {
    IwolError::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> IwolError {
    IwolError::Config(msg.into())
}
