use qsattn_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config: {0}")]
    Config(String),

    #[error("feature maps are not aligned: {0}")]
    Alignment(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite {term} at step {step}: {detail}")]
    NonFinite {
        term: &'static str,
        step: u64,
        detail: String,
    },

    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QsError {
    pub fn config(msg: impl Into<String>) -> Self {
        QsError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, QsError>;
