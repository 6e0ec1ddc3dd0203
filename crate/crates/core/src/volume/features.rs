use super::{ensure_same_dims, field::volume_from_fn_par, Volume3};
use crate::{Error, Result};

#[inline]
fn derivative(data: &[f64], i: usize, pos: usize, n: usize, stride: usize) -> f64 {
    if pos == 0 {
        data[i + stride] - data[i]
    } else if pos == n - 1 {
        data[i] - data[i - stride]
    } else {
        0.5 * (data[i + stride] - data[i - stride])
    }
}

/// Gradient magnitude with central differences inside and one-sided differences
/// on the boundary faces.
pub fn gradient_magnitude(vol: &Volume3) -> Result<Volume3> {
    let dims = vol.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidInput(format!(
            "gradient_magnitude needs at least 2 voxels per axis, got {dims:?}"
        )));
    }
    let [nx, ny, nz] = dims;
    let data = vol.as_slice();
    Ok(volume_from_fn_par(dims, |x, y, z| {
        let i = x + nx * (y + ny * z);
        let gx = derivative(data, i, x, nx, 1);
        let gy = derivative(data, i, y, ny, nx);
        let gz = derivative(data, i, z, nz, nx * ny);
        (gx * gx + gy * gy + gz * gz).sqrt()
    }))
}

/// Voxelwise `subject - template`.
pub fn difference_map(subject: &Volume3, template: &Volume3) -> Result<Volume3> {
    ensure_same_dims(subject.dims(), template.dims(), "difference_map")?;
    let data = subject
        .as_slice()
        .iter()
        .zip(template.as_slice())
        .map(|(s, t)| s - t)
        .collect();
    Ok(Volume3::from_vec_unchecked(subject.dims(), data))
}
