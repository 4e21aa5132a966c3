//! Numerical core of a dual-query LiDAR panoptic segmentation model: scene
//! synthesis, voxel geometry, a small reverse-mode autodiff engine, the
//! encoder / query generator / mask decoder, training losses, panoptic
//! inference and evaluation metrics.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops over parallel arrays read closer to the math here.
#![allow(clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod cloud;
pub mod conv;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod math;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod panoptic;
pub mod params;
pub mod query;
pub mod synth;
pub mod targets;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
