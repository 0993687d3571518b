//! Evaluation harness: seeded trials against geometric rubrics, suite
//! aggregation, visual-generalization probes and the ablation experiments.

pub mod ablate;
mod error;
pub mod policy;
pub mod rubric;
pub mod suite;
pub mod trial;

pub use error::EvalError;

pub type Result<T> = std::result::Result<T, EvalError>;
