//! Branch-adapt-route modular post-training at desk scale.

pub mod autograd;
pub mod checkpoint;
pub mod compose;
pub mod config;
pub mod cost;
pub mod domains;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod router;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result, TensorError};
