//! Sampling as optimization over a discrepancy: particles descend the
//! squared kernel Stein discrepancy between their empirical measure and an
//! unnormalized target density, which only requires the target's score
//! function. The crate provides the Stein-modified kernel and its
//! gradient, fixed-step and L-BFGS descent schemes, the SVGD and MMD
//! baselines, a greedy Stein point construction, a library of score
//! models (Gaussians, mixtures, a banana, Bayesian logistic regression,
//! Bayesian ICA), and the diagnostics used to compare runs.
//!
//! Entry points: build a [`kernel::BaseKernel`] and a
//! [`targets::ScoreModel`], wrap them in a [`stein::SteinKernel`], and
//! either call the step functions in [`flows`] directly or drive a whole
//! run through [`flows::run_flow`].

pub mod diagnostics;
pub mod error;
pub mod flows;
pub mod kernel;
mod linalg;
pub mod optim;
pub mod stein;
pub mod targets;

pub use error::{KsdError, Result};
