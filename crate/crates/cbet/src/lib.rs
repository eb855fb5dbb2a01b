//! Goal-conditioned behavior cloning from play data.
//!
//! This crate trains causal-transformer policies on reward-free play
//! trajectories. Actions are discretized with a k-means codec into a bin
//! plus a continuous offset; the policy head predicts a multinomial over
//! bins and a per-bin offset matrix, trained with a focal loss on the bins
//! and a squared-error loss on the true bin's offset. Conditioning is done
//! by prepending a window of future observations (or a label token) to the
//! current observation window before the causal trunk.
//!
//! Module map:
//! - [`playdata`]: trajectory storage, binary dataset format, and hindsight
//!   future-window sampling.
//! - [`codec`]: k-means action discretization.
//! - [`nn`]: a small reverse-mode autodiff engine with the layers the trunk
//!   needs, Adam, and checkpointing.
//! - [`model`]: the conditional policy network and its loss.
//! - [`envs`]: desk-scale multi-modal environments, scripted play
//!   demonstrators, and evaluation oracles.
//! - [`sampler`]: turning head outputs into actions and closed-loop rollouts.
//! - [`trainer`]: the end-to-end training and evaluation harness.

pub mod codec;
pub mod envs;
pub mod error;
pub mod model;
pub mod nn;
pub mod playdata;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
