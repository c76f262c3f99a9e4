//! Desk-scale laboratory for confidence-calibrated adversarial training.
//!
//! The crate is organised bottom-up:
//!
//! - [`netcore`]: dense feedforward networks with exact backpropagation to
//!   parameters and inputs.
//! - [`geometry`]: Lp norms, ball/box projections, gradient normalisation and
//!   perturbation initialisation for `p ∈ {∞, 2, 1, 0}`.
//! - [`attacks`]: PGD with momentum and backtracking, random sampling, distal
//!   examples, adversarial frames and per-example worst-case merging.
//! - [`training`]: normal, adversarial (100% and 50/50) and confidence-calibrated
//!   adversarial training.
//! - [`evaluation`]: confidence-thresholded test error, robust test error, FPR
//!   and ROC AUC.
//! - [`toymodel`]: closed forms and a numeric oracle for the two-point problem
//!   where adversarial training cannot be both robust and accurate.
//! - [`data`], [`profile`], [`config`], [`rng`]: datasets, confidence profiles,
//!   experiment configuration and reproducible random streams.

pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod netcore;
pub mod pipeline;
pub mod profile;
pub mod rng;
pub mod toymodel;
pub mod training;

pub use error::{Error, Result};
