//! Rotated tensor parallelism over a simulated ring of workers.
//!
//! Weight shards rotate clockwise through the ring during the forward pass and
//! counter-clockwise (together with their gradient accumulators) during the
//! backward pass, so every worker holds exactly one shard per layer at any time.
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which all equivalence checks use.

pub mod analysis;
pub mod config;
pub mod error;
pub mod layers;
pub mod partition;
pub mod ring;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type FlatParameter64 = partition::FlatParameter<f64>;
