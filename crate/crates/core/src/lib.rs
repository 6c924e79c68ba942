//! Learnable expansion-and-compression networks for few-shot class-incremental
//! learning.
//!
//! The crate is `no_std` (it needs `alloc`) and carries only the numerical
//! machinery:
//!
//! - [`tensor`] and [`graph`]: dense `f64` tensors and a tape-based reverse-mode
//!   differentiation engine with plain SGD.
//! - [`dataset`]: synthetic Gaussian blobs and the session protocol (a base
//!   session followed by N-way K-shot novel sessions over disjoint classes).
//! - [`model`]: trunk, growing classifier, per-session expansion branches and
//!   their indicators (self-activated or learnable), fused by indicator gating.
//! - [`objectives`]: classification, distillation, indicator regularizers and
//!   the retention hinge, plus their mode-dependent composition.
//! - [`trainer`]: base training, incremental sessions with the β schedule and
//!   the novel-reaches-old stopping rule, and the full protocol run.
//! - [`metrics`]: accuracy, feature drift and indicator sparsity.
//! - [`gradcheck`]: finite-difference oracles for the closed-form indicator
//!   gradients and the first-order decomposition of the indicator update.
//!
//! File formats, the experiment runner and the command line live in the
//! `lecnet-lab` crate.

#![no_std]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod trainer;

mod rng;

pub use error::{Error, Result};
pub use graph::{NodeId, Op, Tape};
pub use tensor::Tensor;
