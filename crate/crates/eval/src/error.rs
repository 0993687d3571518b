use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("routing error: {0}")]
    Routing(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] deskvla_model::ModelError),
    #[error(transparent)]
    World(#[from] deskvla_world::WorldError),
    #[error(transparent)]
    Train(#[from] deskvla_train::TrainError),
    #[error(transparent)]
    Autodiff(#[from] deskvla_autodiff::AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Report(#[from] serde_json::Error),
}
