//! Weakness laboratory.
//!
//! Trains pools of small ReLU MLP classifiers and measures, per network,
//! quantities that move under function-preserving reparameterisation
//! (Hessian trace, weight norms) alongside quantities that cannot
//! (activation-region counts, free regions, the LP pair proxy). A finite
//! engine for vocabularies, languages and extensions backs the counting
//! oracles used throughout the tests.

pub mod data;
pub mod error;
pub mod fcv;
pub mod harness;
pub mod mlp;
pub mod regions;
pub mod reparam;
pub mod rng;
pub mod sharpness;
pub mod stack;
pub mod stats;

pub use error::{Error, Result};
