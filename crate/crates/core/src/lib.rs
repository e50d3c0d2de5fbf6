//! Multi-scale fine-grained classifier with a weakly supervised feature-point
//! selector, built on a small reverse-mode autodiff core.
//!
//! Layering, bottom to top:
//! - [`tensor`], [`tape`], [`gradcheck`], [`optim`]: the differentiation and
//!   optimization engine (generic over f32/f64 via [`scalar::Real`]).
//! - [`nn`], [`backbone`], [`selector`], [`losses`], [`combiner`], [`model`]:
//!   the network — conv backbone with top-down feature fusion, per-block
//!   point selection, the four-term objective, and the fusion head.
//! - [`data`], [`augment`], [`imageio`], [`config`], [`metrics`],
//!   [`checkpoint`], [`train`], [`eval`]: dataset plumbing and the run
//!   harness the CLI drives.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod combiner;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod selector;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
