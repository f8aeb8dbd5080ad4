//! Scene-agnostic dynamic radiance fields.
//!
//! Geometry and motion encoding volumes built from plane sweeps over input frames
//! condition a static and a dynamic radiance field, which are composited with per-sample
//! blending weights. The crate also contains the training losses, the optimization loop,
//! scene I/O with a synthetic scene generator, and image-quality metrics.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod camera;
pub mod config;
pub mod data_io;
pub mod error;
pub mod fields;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod render;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod volumes;

pub use camera::{Camera, DepthPlaneSet, PlaneSpacing, Ray};
pub use config::TrainConfig;

pub use error::{Error, Result};
pub use tensor::Tensor;
