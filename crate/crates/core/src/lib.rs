//! Sharpness-aware minimization laboratory.
//!
//! A small reverse-mode autodiff engine ([`tensor`]), normalization-aware
//! layers with a tagged parameter registry ([`nn`]), every SAM/ASAM
//! perturbation geometry with parameter-scope masks ([`perturb`]), the SAM
//! outer loop with m-sharpness and stage switching ([`optim`]), adaptive
//! worst-case sharpness ([`sharpness`]) and numeric checks of the SAM-ON
//! convergence bound ([`convergence`]).
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! crate-root aliases fix the scalar to `f64`, which is what the training
//! harness uses.

// `!(x > 0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod convergence;
pub mod error;
pub mod nn;
pub mod optim;
pub mod perturb;
pub mod rng;
pub mod scalar;
pub mod sharpness;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{Rng, RngState};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Model = nn::Model<f64>;
pub type NormState = nn::NormState<f64>;
pub type MaskedOperator = perturb::MaskedOperator<f64>;
pub type SamOptimizer = optim::SamOptimizer<f64>;
pub type OptimizerState = optim::OptimizerState<f64>;
pub use convergence::BoundReport;
pub type SharpnessReport = sharpness::SharpnessReport<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Model32 = nn::Model<f32>;
