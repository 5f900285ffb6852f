//! Structured pruning of transformer encoders with hard-concrete L0 gates.

pub mod autograd;
pub mod compact;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod export;
pub mod gates;
pub mod math;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
