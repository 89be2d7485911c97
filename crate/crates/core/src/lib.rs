//! Checkpoint-merging math for paired Instruct/Thinking checkpoints.
//!
//! The merge edits an Instruct checkpoint with a filtered copy of the
//! Thinking-minus-Instruct delta in three stages:
//!
//! 1. [`delta::sparsify`] keeps only coordinates above the per-tensor median
//!    magnitude (rescaled by two),
//! 2. [`taylor`] scores every coordinate by its first-order effect on a
//!    reasoning loss and an agent-preservation loss, keeps the coordinates that
//!    help both, and aggregates them into one coefficient per component and
//!    layer,
//! 3. [`gsp`] attenuates the edit along input directions that carry most of
//!    the activation energy at format-critical token positions.
//!
//! [`merge`] composes the stages and also provides the baseline merge rules.
//! [`micro`] is a small differentiable decoder used to produce gradients and
//! activations at desk scale, and [`synthetic`] plants known structure into
//! paired micro checkpoints to check each stage end to end.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, parallel
//! execution and the command-line driver live in the `crane` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod calibration;
pub mod delta;
pub mod dtype;
mod error;
pub mod gsp;
pub mod linalg;
pub mod merge;
pub mod micro;
pub mod rng;
pub mod schema;
pub mod synthetic;
pub mod taylor;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorMap};
