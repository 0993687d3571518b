use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("graft error: missing {missing:?}, unexpected {unexpected:?}")]
    Graft {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("non-finite gradient for `{param}` at step {step}")]
    NanGradient { param: String, step: usize },
    #[error(transparent)]
    Autodiff(#[from] deskvla_autodiff::AdError),
    #[error(transparent)]
    Model(#[from] deskvla_model::ModelError),
    #[error(transparent)]
    World(#[from] deskvla_world::WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("metrics serialization: {0}")]
    Metrics(#[from] serde_json::Error),
}
