//! Dense 3D volumes, label volumes and displacement fields.
//!
//! All grids are stored x-fastest: voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`.
//! Displacement fields hold their three components channel-major and are expressed
//! in voxel units of their own grid.

mod features;
mod field;
pub mod mvol;
mod patch;
mod sample;

pub use features::{difference_map, gradient_magnitude};
pub use field::{
    compose_fields, invert_field, residual_field, scale_field, warp_labels_nearest, warp_volume,
    FixedPointField, INVERSION_MAX_ITER, INVERSION_TOL,
};
pub use patch::{pad_edge, ExtractPatch};
pub use sample::{trilinear_sample, trilinear_sample_with_grad};

pub(crate) use sample::{sample_clamped, sample_clamped_grad};

use crate::{Error, Result};

pub type Dims = [usize; 3];

pub(crate) fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidInput(format!("dims must be positive, got {dims:?}")));
    }
    Ok(())
}

pub(crate) fn ensure_same_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Iterate `(x, y, z)` in storage order.
pub(crate) fn coords(dims: Dims) -> impl Iterator<Item = (usize, usize, usize)> {
    let [nx, ny, nz] = dims;
    (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| (x, y, z))))
}

/// Scalar intensity (or feature) volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3 {
    dims: Dims,
    data: Vec<f64>,
}

impl Volume3 {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::DimMismatch(format!(
                "volume data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite intensity at index {i}")));
        }
        Ok(Self { dims, data })
    }

    pub(crate) fn from_vec_unchecked(dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), voxel_count(dims));
        Self { dims, data }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(value.is_finite());
        Self { dims, data: vec![value; voxel_count(dims)] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let data = coords(dims).map(|(x, y, z)| f(x, y, z)).collect();
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f64) {
        assert!(value.is_finite(), "non-finite intensity");
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    /// Elementwise map; the closure must keep values finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Volume3) -> Result<f64> {
        ensure_same_dims(self.dims, other.dims, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }
}

/// Integer region-of-interest labels, `0` being background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume3 {
    dims: Dims,
    labels: Vec<u16>,
}

impl LabelVolume3 {
    pub fn new(dims: Dims, labels: Vec<u16>) -> Result<Self> {
        check_dims(dims)?;
        if labels.len() != voxel_count(dims) {
            return Err(Error::DimMismatch(format!(
                "label data length {} does not match dims {dims:?}",
                labels.len()
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, labels: vec![0; voxel_count(dims)] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> u16) -> Result<Self> {
        let labels = coords(dims).map(|(x, y, z)| f(x, y, z)).collect();
        Self::new(dims, labels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u16) {
        let i = x + self.dims[0] * (y + self.dims[1] * z);
        self.labels[i] = label;
    }

    /// Distinct non-zero label ids, ascending.
    pub fn roi_ids(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count(&self, id: u16) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }
}

/// Per-voxel displacement vectors `(dx, dy, dz)` in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField3 {
    dims: Dims,
    /// Channel-major: all dx, then all dy, then all dz.
    data: Vec<f64>,
}

impl DisplacementField3 {
    /// `data` is channel-major (`3 * nx * ny * nz` values).
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != 3 * voxel_count(dims) {
            return Err(Error::DimMismatch(format!(
                "field data length {} does not match 3 x {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite displacement at index {i}")));
        }
        Ok(Self { dims, data })
    }

    pub(crate) fn from_vec_unchecked(dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 3 * voxel_count(dims));
        Self { dims, data }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0.0; 3 * voxel_count(dims)] }
    }

    pub fn constant(dims: Dims, v: [f64; 3]) -> Self {
        assert!(v.iter().all(|c| c.is_finite()));
        let n = voxel_count(dims);
        let mut data = Vec::with_capacity(3 * n);
        for c in v {
            data.extend(std::iter::repeat_n(c, n));
        }
        Self { dims, data }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Result<Self> {
        check_dims(dims)?;
        let n = voxel_count(dims);
        let mut data = vec![0.0; 3 * n];
        for (i, (x, y, z)) in coords(dims).enumerate() {
            let v = f(x, y, z);
            data[i] = v[0];
            data[n + i] = v[1];
            data[2 * n + i] = v[2];
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn vector_at(&self, i: usize) -> [f64; 3] {
        let n = self.voxel_count();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    #[inline]
    pub fn vector(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.vector_at(x + self.dims[0] * (y + self.dims[1] * z))
    }

    pub fn set_vector(&mut self, x: usize, y: usize, z: usize, v: [f64; 3]) {
        assert!(v.iter().all(|c| c.is_finite()), "non-finite displacement");
        let n = self.voxel_count();
        let i = x + self.dims[0] * (y + self.dims[1] * z);
        self.data[i] = v[0];
        self.data[n + i] = v[1];
        self.data[2 * n + i] = v[2];
    }

    /// Euclidean norm of every vector, in storage order.
    pub fn norms(&self) -> Vec<f64> {
        (0..self.voxel_count())
            .map(|i| {
                let v = self.vector_at(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        let n = self.norms();
        n.iter().sum::<f64>() / n.len() as f64
    }

    /// Componentwise sum of two fields on the same grid.
    pub fn add(&self, other: &DisplacementField3) -> Result<Self> {
        ensure_same_dims(self.dims, other.dims, "field add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { dims: self.dims, data })
    }

    /// Largest absolute component difference to another field.
    pub fn max_abs_diff(&self, other: &DisplacementField3) -> Result<f64> {
        ensure_same_dims(self.dims, other.dims, "field max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }
}
