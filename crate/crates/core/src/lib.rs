//! Numerical core for category-level object pose estimation with pixel and
//! point transformers.
//!
//! The crate is `no_std` (with `alloc`). It contains:
//!
//! - [`numerics`]: dense `f64` tensors, neural primitives, a small reverse-mode
//!   tape and a finite-difference gradient checker.
//! - [`pixelformer`]: four-stage pyramid transformer over RGB crops with an
//!   all-MLP decoder producing per-pixel appearance features.
//! - [`pointformer`]: channelwise-attention transformer over point clouds
//!   producing per-point geometry features.
//! - [`msa`]: fusion head producing a shape-prior deformation field and a soft
//!   correspondence matrix, and the resulting NOCS coordinates.
//! - [`pose`]: Umeyama similarity alignment and RANSAC.
//! - [`losses`] and [`metrics`]: training objectives and evaluation measures.
//! - [`synth`]: parametric shapes, shape priors, orthographic renders.
//! - [`pipeline`] and [`train`]: the assembled model, per-sample loss and
//!   Adam updates.
//!
//! IO, file formats and the command-line interface live in the `posevit`
//! companion crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
pub mod losses;
pub mod metrics;
pub mod msa;
pub mod numerics;
pub mod pipeline;
pub mod pixelformer;
pub mod pointformer;
pub mod pose;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Prng, Tensor};
