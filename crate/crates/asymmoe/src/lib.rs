//! Asymmetric mixture-of-experts adapters for a toy dual-encoder classifier,
//! with confidence-aware dampening and load-balancing objectives, a
//! finite-difference gradient oracle, synthetic few-shot data generation, and
//! a deterministic training loop.
//!
//! The crate is framework-free: all tensor arithmetic, forward passes, and
//! hand-derived backward passes live here, in 64-bit precision with fixed
//! reduction order so seeded runs are bit-identical.

pub mod adapter;
pub mod branch_bias;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod serialize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
