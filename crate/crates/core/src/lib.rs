pub mod checkpoint;
pub mod condition;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
