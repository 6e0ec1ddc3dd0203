//! Reverse-mode automatic differentiation over batched 5-D tensors.
//!
//! A [`Tape`] records every operation executed on it. Calling [`Tape::backward`]
//! on a scalar node walks the record in reverse, so each node passes its gradient
//! to its inputs exactly once. The layer set is exactly what the registration
//! network needs: valid 3x3x3 convolution, 1x1x1 convolution, 2x2x2 max pooling,
//! stride-2 transposed convolution, batch normalisation, ReLU, centred crop and
//! concatenation, and a handful of scalar reductions.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod init;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use adam::{Adam, Parameter};
pub use gradcheck::{grad_check, probe_weights, GradCheckOptions, GradCheckReport, InputCheck, Probe};
pub use init::{derive_seed, he_normal, seeded_rng};
pub use real::Real;
pub use tape::{BatchStats, BnMode, Tape, Var};
pub use tensor::Tensor;

/// Batch-norm epsilon used throughout the network.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the batch-norm running average.
pub const BN_MOMENTUM: f64 = 0.9;
