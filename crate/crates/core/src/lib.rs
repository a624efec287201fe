//! Lightweight attention-augmented crack classification.
//!
//! A small residual CNN with a convolutional block attention module, trained
//! with focal loss and inspection-scene degradations, plus the tooling around
//! it: analytic cost accounting, Grad-CAM, statistics for paired fold
//! comparisons, and sliding-window screening of full-resolution imagery.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod nn;
pub mod cbam;
pub mod arch;
pub mod model;
pub mod loss;
pub mod augment;
pub mod data;
pub mod metrics;
pub mod train;
pub mod gradcam;
pub mod inspect;

#[cfg(test)]
pub(crate) mod testutil;
