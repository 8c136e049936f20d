//! Toy unified reasoning-generation training stack.
//!
//! A char-level autoregressive policy model is bridged through a small
//! connector into a rectified-flow image decoder, and the whole thing is
//! trained in four stages: teacher pretraining, connector alignment,
//! chain-of-thought SFT, and group-relative reinforcement learning with
//! dual KL regularizers. Everything runs on the CPU over a synthetic
//! shape/color concept world with a deterministic renderer and a frozen
//! embedding oracle standing in for a contrastive encoder.

pub mod concept_world;
pub mod gen_decoder;
pub mod numerics;
pub mod pipeline;
pub mod policy_lm;
pub mod rewards;
pub mod rgpo;

pub use numerics::{Tensor, TensorError};

/// Cap the global worker pool. Must run before any parallel work; later
/// calls fail harmlessly. Results are bit-identical at any thread count.
pub fn configure_threads(n: usize) -> Result<(), rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()
}
