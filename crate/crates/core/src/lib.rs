//! Training engine for low-bit dense networks with a Ricci-flow corrected
//! straight-through estimator.
//!
//! - [`geometry`]: log-cosh potential, LNE divergence and metric, exact / weak /
//!   learned preconditioning of gradients.
//! - [`quantize`]: 1-bit and k-bit discretizers, the STE clip mask, the
//!   tanh-reweighting transform.
//! - [`ricci`]: discrete Ricci curvature over input translations, the
//!   regularizer `N`, the RF gradient mask, a flow sandbox and a
//!   finite-difference curvature oracle.
//! - [`net`]: dense feed-forward network with hand-written reverse mode and
//!   binary checkpoints.
//! - [`train`]: the full training step and run loop.
//! - [`data`], [`config`]: dataset ingestion and run configuration.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(test)]
#[macro_use]
mod test_util;

pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod net;
pub mod quantize;
pub mod ricci;
pub mod train;

pub use error::{Error, Result};
