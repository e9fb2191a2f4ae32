//! Differentiable local histogram layers for texture classification.
//!
//! The crate is a small, self-contained stack for studying *statistical*
//! versus *structural* texture with neural networks on CPU:
//!
//! - [`tensor`] / [`autograd`] — a dense tensor type and a tape-based
//!   reverse-mode autodiff engine with the handful of primitives the rest
//!   of the crate needs (conv2d, pooling, linear, batch norm, softmax
//!   cross-entropy, elementwise ops) plus a finite-difference gradient
//!   checker.
//! - [`histogram`] — the local radial-basis-function histogram layer with
//!   learnable bin centers and widths, implemented twice: a direct loop
//!   evaluation and an equivalent composition of autograd primitives that
//!   is the trainable path.
//! - [`textures`] — deterministic synthetic texture generators that cross
//!   structural patterns (checkerboard, cross, stripe, sand ripple, rocky,
//!   craters, flat) with statistical foreground distributions (binomial,
//!   multinomial, constant).
//! - [`models`] — shallow single-feature-extractor classifiers and a mini
//!   residual backbone with baseline / parallel-histogram / series-histogram
//!   heads.
//! - [`optim`] / [`train`] — Adam, the training loop with early stopping,
//!   per-factor evaluation, and feature export.
//! - [`metrics`] — accuracy, confusion matrices and the Calinski-Harabasz
//!   cluster validity index.
//! - [`config`] — the line-oriented experiment config format used by the
//!   CLI.
//! - [`verify`] — the self-check suite (gradient checks and loop-oracle
//!   comparisons) behind `histotex verify`.
//!
//! Everything is deterministic: all randomness flows from explicit 64-bit
//! seeds and all reductions run in a fixed order, so a run is a pure
//! function of its configuration.

pub mod autograd;
pub mod config;
pub mod dataset;
pub mod error;
pub mod histogram;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod textures;
pub mod train;
pub mod verify;

/// Scalar element type for all tensor data. `f64` by default; the `f32`
/// cargo feature switches it for speed at the cost of the documented
/// tolerances.
#[cfg(not(feature = "f32"))]
pub type Elem = f64;
#[cfg(feature = "f32")]
pub type Elem = f32;

pub use error::{Error, Result};
pub use tensor::Tensor;
