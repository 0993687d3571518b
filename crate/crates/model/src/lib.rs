//! The policy stack: DDPM machinery over action chunks, the multi-head
//! diffusion-transformer action expert with its stage-1 encoders, and the
//! tiny multimodal backbone that emits reasoning and action tokens.

pub mod backbone;
pub mod diffusion;
pub mod embodiment;
mod error;
pub mod expert;
pub mod image;
pub mod init;
pub mod stage1;
pub mod vocab;

pub use error::ModelError;

pub type Result<T> = std::result::Result<T, ModelError>;
