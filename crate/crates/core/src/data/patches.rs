use rand::Rng;

use super::pairs::SamplePair;
use crate::losses::{extract_gt_for_plan, GtLevelPatches};
use crate::model::{plan_sizes, SizePlan};
use crate::netcore::seeded_rng;
use crate::volume::{Dims, DisplacementField3, ExtractPatch, Volume3};
use crate::{Error, Result};

/// Template intensity above which a voxel counts as foreground.
pub const FOREGROUND_LEVEL: f64 = 0.1;
/// Minimum foreground share of a training patch's output window.
pub const MIN_FOREGROUND_FRACTION: f64 = 0.5;
pub const PATCH_SIZE: usize = 64;

/// Summed-volume table of the foreground mask, for O(1) box counts.
#[derive(Clone, Debug)]
pub struct ForegroundIndex {
    dims: Dims,
    table: Vec<u32>,
}

impl ForegroundIndex {
    pub fn new(template: &Volume3, level: f64) -> Self {
        let dims = template.dims();
        let [nx, ny, nz] = dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut table = vec![0u32; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = (template.get(x, y, z) > level) as u32;
                    let s = v as i64 + table[at(x, y + 1, z + 1)] as i64 + table[at(x + 1, y, z + 1)] as i64
                        + table[at(x + 1, y + 1, z)] as i64
                        - table[at(x, y, z + 1)] as i64
                        - table[at(x, y + 1, z)] as i64
                        - table[at(x + 1, y, z)] as i64
                        + table[at(x, y, z)] as i64;
                    table[at(x + 1, y + 1, z + 1)] = s as u32;
                }
            }
        }
        Self { dims, table }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Foreground voxels in `[origin, origin + size)`; the box must lie inside the grid.
    pub fn count(&self, origin: Dims, size: Dims) -> usize {
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let t = |x: usize, y: usize, z: usize| self.table[x + sx * (y + sy * z)] as i64;
        let [x0, y0, z0] = origin;
        let [x1, y1, z1] = [x0 + size[0], y0 + size[1], z0 + size[2]];
        (t(x1, y1, z1) - t(x0, y1, z1) - t(x1, y0, z1) - t(x1, y1, z0) + t(x0, y0, z1) + t(x0, y1, z0)
            + t(x1, y0, z0)
            - t(x0, y0, z0)) as usize
    }

    pub fn fraction(&self, origin: Dims, size: Dims) -> f64 {
        self.count(origin, size) as f64 / (size[0] * size[1] * size[2]) as f64
    }

    pub fn total(&self) -> usize {
        self.count([0, 0, 0], self.dims)
    }
}

/// Draws patch origins whose output windows are mostly foreground.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    plan: SizePlan,
    foreground: ForegroundIndex,
}

impl PatchSampler {
    pub fn new(template: &Volume3, patch: usize) -> Result<Self> {
        let plan = plan_sizes(patch)?;
        if template.dims().iter().any(|&d| d < patch) {
            return Err(Error::Shape(format!("volume {:?} is smaller than a {patch}^3 patch", template.dims())));
        }
        Ok(Self { plan, foreground: ForegroundIndex::new(template, FOREGROUND_LEVEL) })
    }

    pub fn plan(&self) -> &SizePlan {
        &self.plan
    }

    pub fn foreground(&self) -> &ForegroundIndex {
        &self.foreground
    }

    /// Foreground share of the output window of a patch at `origin`.
    pub fn window_fraction(&self, origin: Dims) -> f64 {
        let off = self.plan.level_offsets().0;
        let out = self.plan.outputs().0;
        self.foreground.fraction(origin.map(|o| o + off), [out; 3])
    }

    /// `count` seeded origins, each accepted only when its output window is at
    /// least half foreground. Duplicates are allowed.
    pub fn origins(&self, count: usize, seed: u64) -> Result<Vec<Dims>> {
        let dims = self.foreground.dims();
        let n = self.plan.input();
        let mut rng = seeded_rng(seed);
        let mut out = Vec::with_capacity(count);
        let max_attempts = 1000 * count.max(1);
        let mut attempts = 0;
        while out.len() < count {
            if attempts == max_attempts {
                return Err(Error::InvalidInput(format!(
                    "found only {} of {count} patches with >= {MIN_FOREGROUND_FRACTION} foreground after {attempts} draws",
                    out.len()
                )));
            }
            attempts += 1;
            let origin: Dims = std::array::from_fn(|a| rng.random_range(0..=dims[a] - n));
            if self.window_fraction(origin) >= MIN_FOREGROUND_FRACTION {
                out.push(origin);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct PatchSample {
    pub origin: Dims,
    pub subject: Volume3,
    pub template: Volume3,
    pub gt: DisplacementField3,
    pub levels: GtLevelPatches,
}

impl PatchSample {
    pub fn extract(
        subject: &Volume3,
        template: &Volume3,
        target: &DisplacementField3,
        origin: Dims,
        plan: &SizePlan,
    ) -> Result<Self> {
        let size = [plan.input(); 3];
        let gt = target.extract_patch(origin, size)?;
        let levels = extract_gt_for_plan(&gt, plan)?;
        Ok(Self {
            origin,
            subject: subject.extract_patch(origin, size)?,
            template: template.extract_patch(origin, size)?,
            gt,
            levels,
        })
    }
}

/// `count` foreground-constrained 64^3 training patches of `pair`, supervised by
/// its training target.
pub fn sample_patches(pair: &SamplePair, count: usize, seed: u64) -> Result<Vec<PatchSample>> {
    let sampler = PatchSampler::new(&pair.template, PATCH_SIZE)?;
    sampler
        .origins(count, seed)?
        .into_iter()
        .map(|o| PatchSample::extract(&pair.subject, &pair.template, pair.supervision(), o, sampler.plan()))
        .collect()
}
