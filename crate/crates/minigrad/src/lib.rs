//! Reverse-mode autodiff sized for desk-scale models.
//!
//! The engine is a flat op tape: every forward op records a node, `backward`
//! replays the tape in reverse and accumulates gradients additively. The
//! same generic code runs the f32 training path and the f64 verification
//! path used by the finite-difference suite in [`check`].
//!
//! No hash maps or thread-dependent iteration exist anywhere on the
//! forward/backward path, so identical inputs replay bit-identically.

mod check;
mod checkpoint;
mod graph;
mod nn;
mod scalar;
mod tensor;

pub use check::{grad_check, GradReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, MAGIC, VERSION};
pub use graph::{Graph, Var};
pub use nn::{gru_step, linear, scaled_dot_attention, transformer_layer, GruParams, TransformerLayerParams};
pub use scalar::{lit, Scalar};
pub use tensor::Tensor;
