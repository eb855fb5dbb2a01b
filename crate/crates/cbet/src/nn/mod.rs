//! Reverse-mode automatic differentiation over dense tensors, plus the
//! layers, optimizer, and checkpoint format the policy network needs.
//!
//! The substrate is deliberately small: a [`session::Session`] records each
//! primitive as it executes and replays the tape backwards to accumulate
//! exact gradients into named parameters. Everything is generic over the
//! element type so training runs in `f32` while the finite-difference
//! gradient oracle runs in `f64`.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod session;
pub mod tensor;

pub use checkpoint::CheckpointError;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use session::{Session, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch: {context}")]
    Shape { op: &'static str, context: String },
    #[error("duplicate parameter name {name}")]
    DuplicateParam { name: String },
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("backward target must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}
