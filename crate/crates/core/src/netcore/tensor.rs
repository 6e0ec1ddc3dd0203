use super::Real;
use crate::{Error, Result};

/// Batched multi-channel 3-D tensor with shape `(B, C, X, Y, Z)`.
///
/// Storage is x-fastest within a channel, channels within a batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 5], v: T) -> Self {
        Self { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: [1, 1, 1, 1, 1], data: vec![v] }
    }

    /// Build from `f(b, c, x, y, z)`.
    pub fn from_fn(shape: [usize; 5], mut f: impl FnMut(usize, usize, usize, usize, usize) -> T) -> Self {
        let [nb, nc, nx, ny, nz] = shape;
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..nb {
            for c in 0..nc {
                for z in 0..nz {
                    for y in 0..ny {
                        for x in 0..nx {
                            data.push(f(b, c, x, y, z));
                        }
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial extent `[X, Y, Z]`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, x: usize, y: usize, z: usize) -> usize {
        let [_, nc, nx, ny, nz] = self.shape;
        x + nx * (y + ny * (z + nz * (c + nc * b)))
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(b, c, x, y, z)]
    }

    /// Contiguous values of channel `c` of batch item `b`.
    pub fn slab(&self, b: usize, c: usize) -> &[T] {
        let v = self.spatial_len();
        let start = (b * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.f64().abs()))
    }
}
