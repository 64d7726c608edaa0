//! Depthwise-separable single-image super-resolution on the CPU.
//!
//! The crate is organized bottom-up: [`tensor`] holds the NCHW container,
//! [`nn`] the layer primitives and adjoints, [`model`] the generator and
//! discriminator graphs with checkpointing, [`loss`] and [`metrics`] the
//! objectives and quality scores, [`data`] the bicubic LR/HR pipeline,
//! [`train`] AdamW, plateau scheduling and the GAN loop, and [`bench`] the
//! per-frame latency harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
