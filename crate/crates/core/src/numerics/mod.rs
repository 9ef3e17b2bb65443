//! Minimal f64 tensor math with reverse-mode autodiff.
//!
//! Everything downstream — detector pretraining, patch optimization, VQA
//! training — runs on this module. Design rules:
//!
//! * f64 only; no mixed precision anywhere.
//! * Dynamic graphs: a fresh [`Graph`] per forward pass, freed afterwards.
//! * Additive gradient accumulation (shared nodes sum their contributions).
//! * Cross-entropy goes through log-sum-exp; a softmax is never materialized
//!   inside a loss.
//! * Identical inputs produce bitwise-identical outputs and gradients: all
//!   reductions run in fixed order, and nothing is threaded.

mod adam;
mod graph;
mod gradcheck;
mod tensor;

pub use adam::{adam_update, AdamParams, AdamState};
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId, Reduction};
pub use tensor::{stable_sigmoid, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {shapes}")]
    ShapeMismatch { op: String, shapes: String },
    #[error("backward needs a scalar loss, got shape {shape}")]
    NotScalarLoss { shape: String },
    #[error("non-finite value in {op}")]
    NonFinite { op: String },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGrad { param: String },
    #[error("{what}")]
    InvalidArg { what: String },
}
