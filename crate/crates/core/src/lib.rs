//! Adversarial training with adaptive per-example step sizes.
//!
//! The crate bundles a small reverse-mode autodiff engine, desk-scale
//! classifiers, L∞ attacks, the single-step adversarial trainers (FGSM-RS,
//! ATTA, ATAS) next to multi-step PGD training, catastrophic-overfitting
//! diagnostics, and stochastic block-coordinate minimax solvers with exact
//! regret measurement.

pub mod adaptive;
pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
mod linalg;
pub mod models;
pub mod saddle;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::Tensor;
