use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::netcore::seeded_rng;
use crate::par;
use crate::volume::{Dims, LabelVolume3, Volume3};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Labelled ellipsoids painted in order onto a zero background; later regions win
/// where they overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub rois: Vec<Ellipsoid>,
    /// Standard deviation of white noise added before smoothing.
    pub noise: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// The first region is a large low-intensity body; the other `n_rois - 1` are
    /// random ellipsoids inside it.
    pub fn random(dims: Dims, n_rois: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed ^ 0x5eed_0f_b0d7);
        let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let body = Ellipsoid { center: c, radii: dims.map(|d| 0.40 * d as f64), intensity: 0.3 };
        let mut rois = Vec::with_capacity(n_rois);
        if n_rois > 0 {
            rois.push(body.clone());
        }
        for _ in 1..n_rois {
            let radii: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.random_range(0.06..0.13));
            // centers within half the body radius, so regions stay inside the body
            let center: [f64; 3] = std::array::from_fn(|a| c[a] + body.radii[a] * rng.random_range(-0.5..0.5));
            rois.push(Ellipsoid { center, radii, intensity: rng.random_range(0.45..0.95) });
        }
        Self { dims, rois, noise: 0.02, blur_sigma: 2.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!("dims must be positive, got {:?}", self.dims)));
        }
        for e in &self.rois {
            if !(0.0..=1.0).contains(&e.intensity) {
                return Err(Error::InvalidInput(format!("intensity {} outside [0, 1]", e.intensity)));
            }
            for a in 0..3 {
                if e.radii[a] <= 0.0 || e.center[a] < 0.0 || e.center[a] > (self.dims[a] - 1) as f64 {
                    return Err(Error::InvalidInput(format!("region {e:?} outside the grid")));
                }
            }
        }
        if self.noise < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::InvalidInput("noise and blur must be non-negative".into()));
        }
        Ok(())
    }
}

/// Render a phantom: intensities in `[0, 1]` and labels `1..=rois.len()` (0 outside every region).
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(Volume3, LabelVolume3)> {
    spec.validate()?;
    let dims = spec.dims;
    let mut labels = LabelVolume3::zeros(dims);
    let mut img = vec![0.0; dims[0] * dims[1] * dims[2]];
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                for (k, r) in spec.rois.iter().enumerate() {
                    if r.contains(p) {
                        img[i] = r.intensity;
                        labels.set(x, y, z, (k + 1) as u16);
                    }
                }
                i += 1;
            }
        }
    }
    if spec.noise > 0.0 {
        let mut rng = seeded_rng(spec.seed);
        let dist = Normal::new(0.0, spec.noise).expect("finite noise");
        for v in img.iter_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    let vol = Volume3::new(dims, img)?;
    let vol = if spec.blur_sigma > 0.0 { gaussian_blur(&vol, spec.blur_sigma) } else { vol };
    Ok((vol.map(|v| v.clamp(0.0, 1.0))?, labels))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing with clamp-to-edge boundaries.
pub fn gaussian_blur(vol: &Volume3, sigma: f64) -> Volume3 {
    let dims = vol.dims();
    let data = blur_slice(vol.as_slice(), dims, sigma);
    Volume3::from_vec_unchecked(dims, data)
}

pub(crate) fn blur_slice(src: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let [nx, ny, _] = dims;
    let strides = [1, nx, nx * ny];
    let mut cur = src.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let st = strides[axis];
        let prev = cur;
        let mut next = vec![0.0; prev.len()];
        // one z-plane per task; every task only reads `prev`
        par::for_each_chunk_mut(&mut next, nx * ny, |z, plane| {
            for y in 0..ny {
                for x in 0..nx {
                    let pos = [x, y, z][axis] as isize;
                    let base = x + nx * (y + ny * z) - pos as usize * st;
                    let mut acc = 0.0;
                    for (t, w) in k.iter().enumerate() {
                        let q = (pos + t as isize - r).clamp(0, n - 1) as usize;
                        acc += w * prev[base + q * st];
                    }
                    plane[x + nx * y] = acc;
                }
            }
        });
        cur = next;
    }
    cur
}
