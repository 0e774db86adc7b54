//! Sequential phrase grounding on feature-level scenes.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod decision;
pub mod embed;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod opt;
pub mod order_embed;
pub mod rngs;
pub mod stacks;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
