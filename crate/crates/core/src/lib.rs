//! Voxel radiance field toolkit for reconstructing planar street geometry
//! from posed stereo images. Provides the differentiable renderer, the
//! plane-aware training losses, geometry metrics, and a synthetic scene
//! generator used to exercise all of it end to end.

pub mod dataset;
pub mod error;
pub mod field;
pub mod geometry;
pub mod imageio;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod render;
pub mod trainer;

pub use error::{Error, Result};
pub use math::Vec3;
