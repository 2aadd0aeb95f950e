//! Part-based Gaussian body templates, their affine articulation, and
//! gradient-based fitting of per-part transforms to observed part heatmaps.
//!
//! A [`Template`](template::Template) is a set of 2D Gaussian parts joined by
//! anchor pairs. Each part gets its own [`AffineTransform`](geometry::AffineTransform);
//! [`fit::fit_pose`] finds the transforms that best explain a target
//! [`PartMaps`](render::PartMaps) under the reconstruction, anchor and
//! boundary losses, and [`eval`] turns the result into keypoints and scores.

pub mod cli;
pub mod diff;
pub mod error;
pub mod eval;
pub mod files;
pub mod fit;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod render;
pub mod synth;
pub mod template;

pub use error::{Error, Result};
