use super::{Dims, Volume3};
use crate::{Error, Result};

/// Cell lookup along one axis with clamp-to-edge.
///
/// Returns `(i0, i1, t, inside)`; `inside` is false when the coordinate was clamped,
/// in which case the sample does not vary with the coordinate.
#[inline]
fn axis_cell(p: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    if p < 0.0 {
        return (0, 1, 0.0, false);
    }
    if p > hi {
        return (n - 2, n - 1, 1.0, false);
    }
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, i0 + 1, p - i0 as f64, true)
}

#[inline]
pub(crate) fn sample_clamped(data: &[f64], dims: Dims, p: [f64; 3]) -> f64 {
    let [nx, ny, _] = dims;
    let (x0, x1, tx, _) = axis_cell(p[0], dims[0]);
    let (y0, y1, ty, _) = axis_cell(p[1], dims[1]);
    let (z0, z1, tz, _) = axis_cell(p[2], dims[2]);
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)];
    let c00 = at(x0, y0, z0) * (1.0 - tx) + at(x1, y0, z0) * tx;
    let c10 = at(x0, y1, z0) * (1.0 - tx) + at(x1, y1, z0) * tx;
    let c01 = at(x0, y0, z1) * (1.0 - tx) + at(x1, y0, z1) * tx;
    let c11 = at(x0, y1, z1) * (1.0 - tx) + at(x1, y1, z1) * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    c0 * (1.0 - tz) + c1 * tz
}

/// Sample plus its partial derivatives with respect to the sample position.
///
/// Derivatives are taken inside the containing cell and are zero along axes where
/// the position was clamped.
#[inline]
pub(crate) fn sample_clamped_grad(data: &[f64], dims: Dims, p: [f64; 3]) -> (f64, [f64; 3]) {
    let [nx, ny, _] = dims;
    let (x0, x1, tx, ix) = axis_cell(p[0], dims[0]);
    let (y0, y1, ty, iy) = axis_cell(p[1], dims[1]);
    let (z0, z1, tz, iz) = axis_cell(p[2], dims[2]);
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)];
    let v000 = at(x0, y0, z0);
    let v100 = at(x1, y0, z0);
    let v010 = at(x0, y1, z0);
    let v110 = at(x1, y1, z0);
    let v001 = at(x0, y0, z1);
    let v101 = at(x1, y0, z1);
    let v011 = at(x0, y1, z1);
    let v111 = at(x1, y1, z1);

    let c00 = v000 * (1.0 - tx) + v100 * tx;
    let c10 = v010 * (1.0 - tx) + v110 * tx;
    let c01 = v001 * (1.0 - tx) + v101 * tx;
    let c11 = v011 * (1.0 - tx) + v111 * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    let value = c0 * (1.0 - tz) + c1 * tz;

    let gx = if ix {
        let d00 = v100 - v000;
        let d10 = v110 - v010;
        let d01 = v101 - v001;
        let d11 = v111 - v011;
        let d0 = d00 * (1.0 - ty) + d10 * ty;
        let d1 = d01 * (1.0 - ty) + d11 * ty;
        d0 * (1.0 - tz) + d1 * tz
    } else {
        0.0
    };
    let gy = if iy { (c10 - c00) * (1.0 - tz) + (c11 - c01) * tz } else { 0.0 };
    let gz = if iz { c1 - c0 } else { 0.0 };
    (value, [gx, gy, gz])
}

fn check_point(p: [f64; 3]) -> Result<()> {
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite sample position {p:?}")));
    }
    Ok(())
}

/// Trilinear interpolation at a continuous voxel position, clamping to the edge
/// outside `[0, n - 1]` on each axis.
pub fn trilinear_sample(vol: &Volume3, p: [f64; 3]) -> Result<f64> {
    check_point(p)?;
    Ok(sample_clamped(vol.as_slice(), vol.dims(), p))
}

/// Like [`trilinear_sample`], also returning `d sample / d p`.
pub fn trilinear_sample_with_grad(vol: &Volume3, p: [f64; 3]) -> Result<(f64, [f64; 3])> {
    check_point(p)?;
    Ok(sample_clamped_grad(vol.as_slice(), vol.dims(), p))
}
