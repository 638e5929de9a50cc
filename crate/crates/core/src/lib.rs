//! Task-amenability image quality assessment.
//!
//! A scoring controller learns per-sample quality by gating which samples
//! train a task predictor inside a policy-gradient loop: quality is defined
//! by the measured impact a sample has on downstream task performance.
//! Alongside the task-specific definition, a task-agnostic one trains the
//! same loop against self-reconstruction, and a shaped per-sample reward
//! blends the two with a weight `phi`.
//!
//! The numerical core (tensors, networks, reward algebra) is generic over
//! the scalar type via [`scalar::Real`]; `f64` is the default used by the
//! training stack, with `*32` aliases exported for single precision.

pub mod config;
pub mod controller;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod nn;
pub mod reward;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;

/// Single-precision instantiations of the generic numerical core.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Network32 = nn::Network<f32>;
pub type Gradients32 = nn::Gradients<f32>;
pub type RewardState32 = reward::RewardState<f32>;
