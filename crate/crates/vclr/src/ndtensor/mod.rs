//! A small reverse-mode autodiff tensor library over `f64`.
//!
//! Dynamic graphs in the micrograd style: every op records its parents and a
//! closure that routes the output gradient back to them. `backward` on a
//! scalar walks the recorded nodes in reverse creation order, so each node's
//! gradient is complete before it propagates. Values are immutable after
//! creation; optimizers replace parameter tensors instead of mutating them.

mod adamw;
mod checkpoint;
pub mod gradcheck;
mod ops;
mod param;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use param::{init, EmaTracker, ParamStore};
pub use tensor::{grad_enabled, no_grad, Tensor, TensorError};
