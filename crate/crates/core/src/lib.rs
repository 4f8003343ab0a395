//! Subtask distillation: layer-wise knowledge distillation restricted to the
//! task-relevant subspaces of a teacher network.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] dense matrices, symmetric eigendecomposition, QR and the
//!   Stiefel retraction.
//! * [`model`] a small feedforward network with exact backpropagation.
//! * [`subspace`] relevant-subspace extraction (PRCA) plus PCA and random
//!   baselines.
//! * [`loss`] the output KL term, the orthogonal subspace-matching layer loss
//!   and the `(W, b)` baseline.
//! * [`trainer`] joint and decoupled distillation, teacher training and the
//!   ablation suite.
//! * [`analysis`] linear CKA, centred kernels and LRP attributions.
//! * [`synth`] the one-dimensional manifold band-kernel experiment.
//! * [`data`] dataset loading, subtasks and stratified splits.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod data;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod subspace;
pub mod synth;
pub mod trainer;

mod error;
pub mod svg;

pub use error::{Error, Result};
