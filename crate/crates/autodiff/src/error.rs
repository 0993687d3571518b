use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}
