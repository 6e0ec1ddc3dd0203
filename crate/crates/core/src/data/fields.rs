use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::phantom::blur_slice;
use crate::netcore::seeded_rng;
use crate::volume::{Dims, DisplacementField3};
use crate::{Error, Result};

/// Two smoothing regimes standing in for two different classical registrars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldFamily {
    A,
    B,
}

impl FieldFamily {
    pub fn name(self) -> &'static str {
        match self {
            FieldFamily::A => "A",
            FieldFamily::B => "B",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(FieldFamily::A),
            "B" | "b" => Ok(FieldFamily::B),
            _ => Err(Error::InvalidInput(format!("unknown field family `{s}`"))),
        }
    }

    pub fn kernel_scale(self) -> f64 {
        match self {
            FieldFamily::A => 1.0,
            FieldFamily::B => 1.5,
        }
    }
}

fn taper(i: usize, n: usize, margin: f64, ramp: f64) -> f64 {
    let d = i.min(n - 1 - i) as f64;
    if d < margin {
        0.0
    } else if d < margin + ramp {
        0.5 * (1.0 - (std::f64::consts::PI * (d - margin) / ramp).cos())
    } else {
        1.0
    }
}

/// Random smooth displacement with max vector norm exactly `max_magnitude`,
/// vanishing within `2 * sigma` voxels of the boundary.
///
/// Fails with [`Error::NotInvertible`] when the displacement gradient reaches
/// spectral norm 1 anywhere, since `I + grad u` may then be singular.
pub fn sample_smooth_field(
    dims: Dims,
    max_magnitude: f64,
    sigma: f64,
    family: FieldFamily,
    seed: u64,
) -> Result<DisplacementField3> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidInput(format!("dims must be positive, got {dims:?}")));
    }
    if !(max_magnitude >= 0.0 && max_magnitude.is_finite()) || !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!(
            "need max_magnitude >= 0 and sigma > 0, got {max_magnitude} and {sigma}"
        )));
    }
    if max_magnitude == 0.0 {
        return Ok(DisplacementField3::zeros(dims));
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut rng = seeded_rng(seed);
    let noise: Vec<f64> = (0..3 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let s = sigma * family.kernel_scale();
    let (margin, ramp) = (2.0 * sigma, 2.0 * sigma);
    let mut data = Vec::with_capacity(3 * n);
    for c in 0..3 {
        data.extend(blur_slice(&noise[c * n..(c + 1) * n], dims, s));
    }
    let [nx, ny, nz] = dims;
    let wx: Vec<f64> = (0..nx).map(|i| taper(i, nx, margin, ramp)).collect();
    let wy: Vec<f64> = (0..ny).map(|i| taper(i, ny, margin, ramp)).collect();
    let wz: Vec<f64> = (0..nz).map(|i| taper(i, nz, margin, ramp)).collect();
    for z in 0..nz {
        for y in 0..ny {
            let wyz = wy[y] * wz[z];
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let w = wx[x] * wyz;
                for c in 0..3 {
                    data[c * n + i] *= w;
                }
            }
        }
    }
    let field = DisplacementField3::new(dims, data)?;
    let peak = field.max_norm();
    if peak == 0.0 {
        return Err(Error::InvalidInput(format!(
            "grid {dims:?} has no interior left after a {margin}-voxel boundary margin"
        )));
    }
    let k = max_magnitude / peak;
    let field = DisplacementField3::new(dims, field.into_vec().into_iter().map(|v| v * k).collect())?;
    jacobian_check(&field)?;
    Ok(field)
}

fn spectral_norm(a: [[f64; 3]; 3]) -> f64 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[k][i] * a[k][j]).sum();
        }
    }
    let mut v = [1.0, 0.7, 0.4];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let w: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| m[i][j] * v[j]).sum());
        let norm = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.map(|x| x / norm);
    }
    lambda.sqrt()
}

/// Largest spectral norm of the central-difference displacement gradient, and where.
/// Errors when it reaches 1.
pub fn jacobian_check(field: &DisplacementField3) -> Result<(f64, [usize; 3])> {
    let dims = field.dims();
    let [nx, ny, nz] = dims;
    let mut worst = (0.0, [0, 0, 0]);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x, y, z];
                let mut g = [[0.0; 3]; 3];
                for axis in 0..3 {
                    let (mut lo, mut hi) = (p, p);
                    lo[axis] = p[axis].saturating_sub(1);
                    hi[axis] = (p[axis] + 1).min(dims[axis] - 1);
                    let span = (hi[axis] - lo[axis]) as f64;
                    if span == 0.0 {
                        continue;
                    }
                    let a = field.vector(hi[0], hi[1], hi[2]);
                    let b = field.vector(lo[0], lo[1], lo[2]);
                    for c in 0..3 {
                        g[c][axis] = (a[c] - b[c]) / span;
                    }
                }
                let s = spectral_norm(g);
                if s > worst.0 {
                    worst = (s, p);
                }
            }
        }
    }
    if worst.0 >= 1.0 {
        return Err(Error::NotInvertible { max_norm: worst.0, voxel: worst.1 });
    }
    Ok(worst)
}
