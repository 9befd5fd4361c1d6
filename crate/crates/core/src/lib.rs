//! Multi-graph neural operator for PDEs on irregular point sets.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode tape.
//! * [`geometry`]: farthest point sampling, nearest neighbours, inverse
//!   distance interpolation.
//! * [`graph`]: high-frequency indicator and the local, global and physics
//!   graphs rebuilt at every processing layer.
//! * [`graphformer`]: multi-head graph attention inside a pre-norm block.
//! * [`model`]: encoder, multi-graph processor and decoder.
//! * [`data`]: Poisson benchmark generation with a finite-difference oracle.
//! * [`train`]: objective, Adam, learning-rate schedule and training loop.
//! * [`baseline`]: pointwise MLP used for comparison.
//! * [`checkpoint`], [`run`]: checkpoints and run directories on disk.
//! * [`verify`]: property suites behind `amg verify`.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision flavour used by the CLI and the tests.

// Index loops mirror the math in numeric kernels, and `!(x < t)` is used on
// purpose so NaN fails every bound check.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod graphformer;
pub mod model;
pub mod params;
pub mod run;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
