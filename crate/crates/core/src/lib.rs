//! Differentiable Gaussian splatting and photometric bundle adjustment.
//!
//! The crate covers camera geometry, the Gaussian scene model, a tile-based
//! splatting renderer with analytic gradients for every raw parameter, the
//! optimization loop that recovers cameras and depth from images alone,
//! masked multi-view attention, evaluation metrics, and a synthetic scene
//! harness.

pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod image;
pub mod json;
mod par;
pub mod params;
pub mod render;
pub mod metrics;
pub mod attention;
pub mod ba;
pub mod gradcheck;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
pub use par::PARALLEL_AVAILABLE;
