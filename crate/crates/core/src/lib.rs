//! Dual-supervised hierarchical fully convolutional registration of 3D volumes.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`]: dense volumes, label volumes, displacement-field algebra and MVOL I/O.
//! - [`netcore`]: a small reverse-mode autodiff engine over batched 5-D tensors.
//! - [`model`]: the gap-filled U-Net with three supervision heads.
//! - [`losses`]: hierarchical displacement losses, image similarity and the staged combination.
//! - [`data`]: synthetic phantoms with exactly known ground-truth fields and augmentation.
//! - [`engine`]: training loop, checkpointing, sliding-window inference and metrics.
//! - [`config`]: the flat `key=value` run configuration shared by the command-line tool.

pub mod config;
pub mod data;
pub mod engine;
mod error;
pub mod losses;
pub mod model;
pub mod netcore;
pub mod par;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
