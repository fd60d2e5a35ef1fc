//! Structured universal adversarial perturbations for frame sequences.
//!
//! A single perturbation `δ ∈ R^{H×W×C}` is optimized so that, added to every
//! frame of a sequence, it suppresses the detections of a differentiable blob
//! detector. Perturbations are shaped by a nuclear-norm plus squared-Frobenius
//! regularizer and optimized with an adaptive optimistic exponentiated-gradient
//! method on the singular values of each channel. Two baselines (factored
//! low-rank PGD and Frank-Wolfe over a nuclear ball) and the evaluation metrics
//! used to compare them are included.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod detector;
mod error;
pub mod losses;
pub mod metrics;
pub mod report;
pub mod scene;
pub mod solvers;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};

/// Dense real matrix, row-major.
pub type Matrix = ndarray::Array2<f64>;
