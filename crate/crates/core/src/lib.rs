//! Learned particle simulation: a small tape autodiff engine, synthetic
//! particle worlds, an explicit-edge message passing baseline and a
//! transformer that keeps edge state implicit.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod crosscheck;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod gnn;
pub mod model;
pub mod nn;
pub mod particles;
pub mod tensor;
pub mod tie;
pub mod train;
pub mod verify;
pub mod worlds;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
