//! The embodied-curriculum trainer: per-stage freezing and data filters,
//! AdamW with schedules, deterministic training loops, checkpoint surgery
//! between stages and throughput measurement.

mod error;
pub mod model;
pub mod optim;
pub mod run;
pub mod stage;

pub use error::TrainError;

pub type Result<T> = std::result::Result<T, TrainError>;
