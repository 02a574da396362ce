//! Relative coordinate maps, pixel-aligned Gaussian splats and the
//! geometry around them: ray-cast synthetic scenes, PnP/RANSAC pose
//! recovery from coordinate maps, a differentiable CPU splat rasterizer,
//! direct splat fitting, and image/geometry metrics.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod fit;
pub mod fixtures;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod pose;
pub mod rcm;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
