//! View-consistent open-world instance segmentation, end to end on the CPU.
//!
//! The crate trains a small query-based detector on procedurally generated
//! scenes. A frozen EMA teacher always sees the natural rendering of a scene
//! while the student sees a randomly chosen view (natural, structure-only, or
//! stylized); class-agnostic object proposals anchor a matching between the
//! two branches, and matched query pairs are pulled together with a cosine
//! consistency loss. Evaluation is class-agnostic average recall over boxes
//! and masks, with the known/unknown split decided by object attributes.
//!
//! Everything is deterministic given a seed. Start with the runnable
//! examples:
//!
//! * `autodiff_basics` — tensors, broadcasting, reverse-mode gradients
//! * `geometry` — boxes, GIoU, mask IoU, run-length codes, NMS
//! * `matching` — assignment costs and the proposal–query matching
//! * `generate` — render a dataset to disk and inspect one record
//! * `train_baseline` — supervised-only training on known objects
//! * `train_vclr` — the full two-branch consistency recipe
//! * `evaluate` — average-recall tables for a checkpoint
//! * `robustness` — weight perturbation and distortion sweeps
//! * `ablation` — the five-rung recipe ladder
//!
//! The thin `vclr` binary wraps the same entry points for scripting.

pub mod cli;
pub mod config;
pub mod evalkit;
pub mod geom;
pub mod losses;
pub mod model;
pub mod ndtensor;
pub mod robustness;
pub mod setmatch;
pub mod trainer;
pub mod util;
pub mod worldgen;
