//! Surgical fine-tuning laboratory.
//!
//! A small dense-tensor training core with per-tensor freezing, fine-tuning
//! strategies (surgical block tuning, gradual unfreezing, L1-SP), automatic
//! layer-selection criteria (relative gradient norm, gradient SNR), synthetic
//! distribution shifts, test-time entropy minimization, and numerical checks of
//! two-layer network fine-tuning dynamics.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod seed;
pub mod select;
pub mod shift;
pub mod tensor;
pub mod theory;
pub mod tta;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{BlockId, Checkpoint, CheckpointMeta, Model, ModelSpec, NamedTensor};
pub use tensor::Tensor;
