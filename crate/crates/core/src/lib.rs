//! Differentiable mesh reconstruction from unlabelled images.

pub mod camera;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod model;
pub mod rasterizer;
pub mod trainer;

pub use error::{Error, Result};
