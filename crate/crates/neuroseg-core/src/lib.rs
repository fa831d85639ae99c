//! Core numerics for 3D tubular-structure segmentation.
//!
//! Everything in this crate is pure computation over heap-allocated buffers:
//! a small reverse-mode autodiff engine, the 3D operators built on it, a
//! residual U-Net with an optional global-reasoning block at the bottleneck,
//! skeleton-aware losses, synthetic phantom generation, and evaluation
//! helpers. No IO, no threads, no global state besides a tensor id counter.
//!
//! The crate is `no_std` + `alloc` so the numerics can be embedded anywhere;
//! the companion `neuroseg` crate adds file formats, training orchestration,
//! and the command-line interface.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod gir;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod predict;
pub mod state;
pub mod tensor;
pub mod unet;
pub mod volume;

pub use error::{CoreError, Result};
pub use tensor::{Scalar, Tensor};
