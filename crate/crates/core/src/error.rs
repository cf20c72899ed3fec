use keygate_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("key error: {0}")]
    Key(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training error at step {step}: {detail}")]
    Training { step: usize, detail: String },
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("watermark capacity exceeded: {0}")]
    Capacity(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
