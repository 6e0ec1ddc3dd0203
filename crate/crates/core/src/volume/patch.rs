use super::{voxel_count, Dims, DisplacementField3, LabelVolume3, Volume3};
use crate::{Error, Result};

/// Contiguous sub-block extraction, shared by volumes, label volumes and fields.
pub trait ExtractPatch: Sized {
    fn grid_dims(&self) -> Dims;

    /// Copy the block `[origin, origin + size)` into a new value of the same kind.
    fn extract_patch(&self, origin: Dims, size: Dims) -> Result<Self>;
}

fn check_window(dims: Dims, origin: Dims, size: Dims) -> Result<()> {
    for a in 0..3 {
        if size[a] == 0 || origin[a] + size[a] > dims[a] {
            return Err(Error::OutOfBounds(format!(
                "patch origin {origin:?} size {size:?} exceeds dims {dims:?}"
            )));
        }
    }
    Ok(())
}

fn copy_block<T: Copy>(src: &[T], dims: Dims, origin: Dims, size: Dims, out: &mut Vec<T>) {
    let [nx, ny, _] = dims;
    for z in 0..size[2] {
        for y in 0..size[1] {
            let start = origin[0] + nx * ((origin[1] + y) + ny * (origin[2] + z));
            out.extend_from_slice(&src[start..start + size[0]]);
        }
    }
}

impl ExtractPatch for Volume3 {
    fn grid_dims(&self) -> Dims {
        self.dims()
    }

    fn extract_patch(&self, origin: Dims, size: Dims) -> Result<Self> {
        check_window(self.dims(), origin, size)?;
        let mut out = Vec::with_capacity(voxel_count(size));
        copy_block(self.as_slice(), self.dims(), origin, size, &mut out);
        Ok(Volume3::from_vec_unchecked(size, out))
    }
}

impl ExtractPatch for LabelVolume3 {
    fn grid_dims(&self) -> Dims {
        self.dims()
    }

    fn extract_patch(&self, origin: Dims, size: Dims) -> Result<Self> {
        check_window(self.dims(), origin, size)?;
        let mut out = Vec::with_capacity(voxel_count(size));
        copy_block(self.as_slice(), self.dims(), origin, size, &mut out);
        LabelVolume3::new(size, out)
    }
}

impl ExtractPatch for DisplacementField3 {
    fn grid_dims(&self) -> Dims {
        self.dims()
    }

    fn extract_patch(&self, origin: Dims, size: Dims) -> Result<Self> {
        check_window(self.dims(), origin, size)?;
        let mut out = Vec::with_capacity(3 * voxel_count(size));
        for c in 0..3 {
            copy_block(self.component(c), self.dims(), origin, size, &mut out);
        }
        Ok(DisplacementField3::from_vec_unchecked(size, out))
    }
}

/// Pad every face by `pad` voxels, replicating the nearest edge voxel.
pub fn pad_edge(vol: &Volume3, pad: usize) -> Volume3 {
    let [nx, ny, nz] = vol.dims();
    let dims = [nx + 2 * pad, ny + 2 * pad, nz + 2 * pad];
    let src = |p: usize, n: usize| p.saturating_sub(pad).min(n - 1);
    let mut out = Vec::with_capacity(voxel_count(dims));
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(vol.get(src(x, nx), src(y, ny), src(z, nz)));
            }
        }
    }
    Volume3::from_vec_unchecked(dims, out)
}
