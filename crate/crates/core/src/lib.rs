//! Hierarchical in-context decision model (IDT).
//!
//! A hierarchical across-episodic sequence model: a high-level decoder picks
//! a latent decision every `c` steps from a return-sorted chain of past
//! episodes, a low-level decoder turns each decision into actions, and an
//! encoder reviews executed windows back into decisions. Around the model sit
//! the Darkroom environment family, a tabular Q-learning data collector, flat
//! AD/AT-layout baselines and exact token-cost accounting.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below pin the two
//! instantiations used in practice.

pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod scalar;
pub mod sequence;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check precision.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type IdtModel32 = model::IdtModel<f32>;
pub type IdtModel64 = model::IdtModel<f64>;
pub type FlatModel32 = model::FlatModel<f32>;
