//! Few-shot classification with prototype-guided localization and
//! region-refined class representations.
//!
//! The pipeline embeds support images with a small CNN, averages them into
//! class prototypes, projects each prototype onto its support feature maps
//! to locate the class object, pools the feature map inside the proposed box
//! with RoIAlign, and averages those region features into refined class
//! representations used for nearest-representation classification.

pub mod dataset;
pub mod encoder;
pub mod episodic;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod localization;
pub mod ops;
pub mod roi;
pub mod tensor;
pub mod tns;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
