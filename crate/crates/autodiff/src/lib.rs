//! Minimal differentiable-array substrate.
//!
//! Dense row-major tensors over `f32`/`f64`, a reverse-mode tape with a fixed
//! primitive set, named parameter sets with freeze support, a finite-difference
//! gradient checker and a versioned checkpoint format. Training runs in `f32`;
//! gradient checks rebuild the same graphs in `f64`.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod params;
mod real;
pub mod rng;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use error::AdError;
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use params::ParamSet;
pub use real::Real;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, AdError>;
