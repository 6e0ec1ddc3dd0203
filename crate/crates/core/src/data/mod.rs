//! Synthetic training data with exactly known deformations.
//!
//! A single smooth phantom serves as the template. Each subject is the template
//! warped by the inverse of a random smooth field, so warping the subject by that
//! field recovers the template up to interpolation error.

mod dataset;
mod fields;
mod pairs;
mod patches;
mod phantom;

pub use dataset::{
    load_dataset, split_manifest, write_dataset, Dataset, DatasetSpec, Manifest, Role, SampleEntry, Split,
};
pub use fields::{jacobian_check, sample_smooth_field, FieldFamily};
pub use pairs::{augment_pair, make_pair, AugmentMode, Provenance, SamplePair, DEFAULT_FRACTIONS};
pub use patches::{
    sample_patches, ForegroundIndex, PatchSample, PatchSampler, FOREGROUND_LEVEL, MIN_FOREGROUND_FRACTION, PATCH_SIZE,
};
pub use phantom::{gaussian_blur, gen_phantom, Ellipsoid, PhantomSpec};

/// Tolerated `max |warp(S, phi) - T|` for a generated pair.
pub const PAIR_TOLERANCE: f64 = 0.05;
/// Tolerated `max |warp(S_c, r_c) - T|` for an augmented pair (two interpolations).
pub const AUGMENTED_TOLERANCE: f64 = 0.08;
