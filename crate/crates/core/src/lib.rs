//! Robustness-aware structured pruning and certification for small
//! keypoint-regression networks under brightness and contrast perturbations.

pub mod certify;
pub mod data;
pub mod error;
pub mod harness;
pub mod network;
pub mod perturbation;
pub mod pipeline;
pub mod usn;
pub mod wasserstein;

pub use error::{Error, Result};
