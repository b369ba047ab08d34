//! Distractor pruning for small neural radiance fields.
//!
//! A radiance field is trained on multi-view images that contain
//! view-inconsistent distractors. Every training pixel is scored (loss,
//! gradient norm or self-influence), scores are compared across views through
//! depth-based reprojection, pixel flags are promoted to whole image segments,
//! and the flagged pixels are dropped from the ray pool before retraining.
//!
//! Modules follow the stages of that pipeline:
//!
//! - [`geometry`]: pinhole cameras and rays
//! - [`synth`]: analytic scenes, distractor injection, dataset I/O
//! - [`field`]: the MLP radiance field, volume rendering and training
//! - [`influence`]: per-pixel distraction scores, Otsu and top-k selection
//! - [`consistency`]: reprojection-based 3σ outlier flags
//! - [`segment`]: segmentation providers and pixel-to-segment refinement
//! - [`pipeline`]: pruning, metrics, configuration and the end-to-end run

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consistency;
pub mod error;
pub mod field;
pub mod geometry;
pub mod influence;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod segment;
pub mod synth;

pub use error::{Error, Result};
