use super::{
    ensure_same_dims, sample_clamped, voxel_count, Dims, DisplacementField3, LabelVolume3, Volume3,
};
use crate::{par, Error, Result};

/// Default stopping tolerance (voxels) for field inversion and residual fields.
pub const INVERSION_TOL: f64 = 1e-3;
/// Default iteration cap for field inversion and residual fields.
pub const INVERSION_MAX_ITER: usize = 50;

/// Result of a fixed-point field solve.
#[derive(Clone, Debug)]
pub struct FixedPointField {
    pub field: DisplacementField3,
    /// Max-norm residual of the defining equation at the returned field, in voxels.
    pub residual: f64,
    pub iterations: usize,
}

pub(crate) fn volume_from_fn_par<F>(dims: Dims, f: F) -> Volume3
where
    F: Fn(usize, usize, usize) -> f64 + Sync + Send,
{
    let [nx, ny, _] = dims;
    let mut out = vec![0.0; voxel_count(dims)];
    par::for_each_chunk_mut(&mut out, nx * ny, |z, slab| {
        for y in 0..ny {
            for x in 0..nx {
                slab[x + nx * y] = f(x, y, z);
            }
        }
    });
    Volume3::from_vec_unchecked(dims, out)
}

pub(crate) fn field_from_fn_par<F>(dims: Dims, f: F) -> DisplacementField3
where
    F: Fn(usize, usize, usize) -> [f64; 3] + Sync + Send,
{
    let [nx, ny, nz] = dims;
    let slabs = par::map_indexed(nz, |z| {
        let mut slab = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                slab.push(f(x, y, z));
            }
        }
        slab
    });
    let n = voxel_count(dims);
    let mut data = vec![0.0; 3 * n];
    for (z, slab) in slabs.into_iter().enumerate() {
        let base = z * nx * ny;
        for (j, v) in slab.into_iter().enumerate() {
            data[base + j] = v[0];
            data[n + base + j] = v[1];
            data[2 * n + base + j] = v[2];
        }
    }
    DisplacementField3::from_vec_unchecked(dims, data)
}

#[inline]
fn sample_field(field: &DisplacementField3, p: [f64; 3]) -> [f64; 3] {
    let dims = field.dims();
    [
        sample_clamped(field.component(0), dims, p),
        sample_clamped(field.component(1), dims, p),
        sample_clamped(field.component(2), dims, p),
    ]
}

#[inline]
fn displaced(x: usize, y: usize, z: usize, d: [f64; 3]) -> [f64; 3] {
    [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]
}

/// Backward warp: `out(u) = vol(u + field(u))`, trilinear with clamp-to-edge.
pub fn warp_volume(vol: &Volume3, field: &DisplacementField3) -> Result<Volume3> {
    ensure_same_dims(vol.dims(), field.dims(), "warp_volume")?;
    let dims = vol.dims();
    let data = vol.as_slice();
    Ok(volume_from_fn_par(dims, |x, y, z| {
        let d = field.vector(x, y, z);
        sample_clamped(data, dims, displaced(x, y, z, d))
    }))
}

/// Backward warp of a label volume with nearest-neighbour lookup.
pub fn warp_labels_nearest(labels: &LabelVolume3, field: &DisplacementField3) -> Result<LabelVolume3> {
    ensure_same_dims(labels.dims(), field.dims(), "warp_labels_nearest")?;
    let dims = labels.dims();
    let pick = |p: f64, n: usize| -> usize { p.round().clamp(0.0, (n - 1) as f64) as usize };
    LabelVolume3::from_fn(dims, |x, y, z| {
        let p = displaced(x, y, z, field.vector(x, y, z));
        labels.get(pick(p[0], dims[0]), pick(p[1], dims[1]), pick(p[2], dims[2]))
    })
}

/// Multiply every displacement vector by `c`.
pub fn scale_field(field: &DisplacementField3, c: f64) -> Result<DisplacementField3> {
    if !c.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite field scale {c}")));
    }
    let data = field.as_slice().iter().map(|v| v * c).collect();
    Ok(DisplacementField3::from_vec_unchecked(field.dims(), data))
}

/// `result(u) = inner(u) + outer(u + inner(u))`: apply `inner` first, then `outer`.
pub fn compose_fields(
    outer: &DisplacementField3,
    inner: &DisplacementField3,
) -> Result<DisplacementField3> {
    ensure_same_dims(outer.dims(), inner.dims(), "compose_fields")?;
    Ok(field_from_fn_par(inner.dims(), |x, y, z| {
        let d = inner.vector(x, y, z);
        let o = sample_field(outer, displaced(x, y, z, d));
        [d[0] + o[0], d[1] + o[1], d[2] + o[2]]
    }))
}

fn max_abs_diff(a: &DisplacementField3, b: &DisplacementField3) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
}

/// Iterate `next = step(current)` until the max update drops below `tol`.
///
/// The returned residual is `max |step(field) - field|` at the returned field, which is
/// exactly the max-norm defect of the fixed-point equation being solved.
fn fixed_point<F>(
    start: DisplacementField3,
    tol: f64,
    max_iter: usize,
    step: F,
) -> Result<FixedPointField>
where
    F: Fn(&DisplacementField3) -> DisplacementField3,
{
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let mut current = start;
    let mut next = step(&current);
    let mut residual = max_abs_diff(&current, &next);
    let mut iterations = 0;
    while residual >= tol && iterations < max_iter {
        current = next;
        next = step(&current);
        residual = max_abs_diff(&current, &next);
        iterations += 1;
    }
    if !residual.is_finite() || residual >= tol {
        return Err(Error::NonConvergence { iterations, residual });
    }
    Ok(FixedPointField { field: current, residual, iterations })
}

/// Inverse displacement `psi` with `psi(u) = -field(u + psi(u))`, so that
/// warping by `field` undoes a warp by `psi` and vice versa.
///
/// Fixed-point iteration from `psi = 0`; fails with [`Error::NonConvergence`]
/// when the residual is still above `tol` after `max_iter` updates.
pub fn invert_field(
    field: &DisplacementField3,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointField> {
    let dims = field.dims();
    fixed_point(DisplacementField3::zeros(dims), tol, max_iter, |psi| {
        field_from_fn_par(dims, |x, y, z| {
            let p = displaced(x, y, z, psi.vector(x, y, z));
            let f = sample_field(field, p);
            [-f[0], -f[1], -f[2]]
        })
    })
}

/// Remaining deformation after pre-warping by a fraction `c` of `field`.
///
/// Solves `r(u) = field(u) - c * field(u + r(u))`, so that warping
/// `S o (c * field)` by `r` reproduces `S o field`. `c = 1` gives zero and `c = 0`
/// gives `field` itself.
pub fn residual_field(
    field: &DisplacementField3,
    c: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointField> {
    let dims = field.dims();
    let start = scale_field(field, 1.0 - c)?;
    fixed_point(start, tol, max_iter, |r| {
        field_from_fn_par(dims, |x, y, z| {
            let p = displaced(x, y, z, r.vector(x, y, z));
            let f = sample_field(field, p);
            let own = field.vector(x, y, z);
            [own[0] - c * f[0], own[1] - c * f[1], own[2] - c * f[2]]
        })
    })
}
