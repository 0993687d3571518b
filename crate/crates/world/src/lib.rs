//! Synthetic tabletop world: planar-arm kinematics, deterministic
//! rasterization, scripted demonstrations with IoU-gated grasp annotation,
//! and the on-disk episode format with normalization and batch assembly.

pub mod annotate;
pub mod batch;
pub mod episode;
mod error;
pub mod gen;
pub mod kin;
pub mod raster;
pub mod scene;
pub mod script;
pub mod stats;
pub mod task;

pub use error::WorldError;

pub type Result<T> = std::result::Result<T, WorldError>;

/// Simulation rate: steps per second.
pub const STEP_RATE: usize = 10;
/// Substep segments must span at least five seconds, final remainder aside.
pub const MIN_SEGMENT_STEPS: usize = 5 * STEP_RATE;
/// IoU threshold gating grasp events.
pub const GRASP_IOU: f64 = 0.25;
