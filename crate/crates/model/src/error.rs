use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] deskvla_autodiff::AdError),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown embodiment `{0}`")]
    UnknownEmbodiment(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("ingest error: {0}")]
    Ingest(String),
    #[error("context window overflow: sequence of {got} exceeds {cap}")]
    ContextOverflow { got: usize, cap: usize },
    #[error("checkpoint incompatible: {0}")]
    CheckpointCompat(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
}
