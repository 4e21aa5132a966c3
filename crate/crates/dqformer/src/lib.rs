//! File formats, datasets, training and evaluation drivers and the
//! command-line front end around `dqformer-core`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod plots;
pub mod training;

pub use error::{Error, Result};
