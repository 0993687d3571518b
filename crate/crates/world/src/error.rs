use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("task generation error: {0}")]
    TaskGen(String),
    #[error("annotation error: {0}")]
    Annotation(String),
    #[error("episode format error: {0}")]
    Format(String),
    #[error("stats error: {0}")]
    Stats(String),
    #[error("empty selection: {0}")]
    EmptySelection(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Model(#[from] deskvla_model::ModelError),
    #[error(transparent)]
    Autodiff(#[from] deskvla_autodiff::AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}
