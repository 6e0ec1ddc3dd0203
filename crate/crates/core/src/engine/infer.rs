use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{dice_table, endpoint_error, mean_dice, DiceRow, EndpointError};
use crate::losses::tensor_to_field;
use crate::model::{assemble_input, plan_sizes, stack_batch, Model};
use crate::netcore::Real;
use crate::volume::{pad_edge, warp_volume, Dims, DisplacementField3, ExtractPatch, LabelVolume3, Volume3};
use crate::{Error, Result};

/// Tiles predicted per forward pass.
const TILE_BATCH: usize = 4;

/// Tile starts along one axis: stride `tile`, with the last tile shifted inward so it ends at `n`.
pub fn tile_origins(n: usize, tile: usize) -> Result<Vec<usize>> {
    if tile == 0 || n < tile {
        return Err(Error::Shape(format!("axis of {n} voxels is smaller than one {tile}-voxel tile")));
    }
    let mut out: Vec<usize> = (0..=n - tile).step_by(tile).collect();
    if out.last() != Some(&(n - tile)) {
        out.push(n - tile);
    }
    Ok(out)
}

/// Equal-weight accumulation of output tiles into a full field.
#[derive(Clone, Debug)]
pub struct Stitcher {
    dims: Dims,
    sum: Vec<f64>,
    count: Vec<u32>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Stitcher {
    pub fn new(dims: Dims) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            dims,
            sum: vec![0.0; 3 * n],
            count: vec![0; n],
            lo: vec![f64::INFINITY; 3 * n],
            hi: vec![f64::NEG_INFINITY; 3 * n],
        }
    }

    pub fn add(&mut self, origin: Dims, tile: &DisplacementField3) -> Result<()> {
        let td = tile.dims();
        if (0..3).any(|a| origin[a] + td[a] > self.dims[a]) {
            return Err(Error::OutOfBounds(format!("tile at {origin:?} of {td:?} exceeds {:?}", self.dims)));
        }
        let [nx, ny, _] = self.dims;
        let n = self.count.len();
        for z in 0..td[2] {
            for y in 0..td[1] {
                for x in 0..td[0] {
                    let i = origin[0] + x + nx * (origin[1] + y + ny * (origin[2] + z));
                    let v = tile.vector(x, y, z);
                    self.count[i] += 1;
                    for c in 0..3 {
                        let j = c * n + i;
                        self.sum[j] += v[c];
                        self.lo[j] = self.lo[j].min(v[c]);
                        self.hi[j] = self.hi[j].max(v[c]);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn min_count(&self) -> u32 {
        self.count.iter().copied().min().unwrap_or(0)
    }

    pub fn counts(&self) -> &[u32] {
        &self.count
    }

    /// Largest disagreement between tiles on any multiply covered voxel.
    pub fn max_overlap_disagreement(&self) -> f64 {
        let n = self.count.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            if self.count[i] > 1 {
                for c in 0..3 {
                    worst = worst.max(self.hi[c * n + i] - self.lo[c * n + i]);
                }
            }
        }
        worst
    }

    pub fn finish(&self) -> Result<DisplacementField3> {
        if self.min_count() == 0 {
            return Err(Error::Shape("stitched field has voxels no tile covered".into()));
        }
        let n = self.count.len();
        let data = (0..3 * n).map(|j| self.sum[j] / self.count[j % n] as f64).collect();
        DisplacementField3::new(self.dims, data)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TileReport {
    pub tiles: usize,
    pub tiles_per_axis: [usize; 3],
    pub min_coverage: u32,
    pub max_overlap_disagreement: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub field: DisplacementField3,
    pub warped: Volume3,
    pub report: TileReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegistrationMetrics {
    pub dice: Vec<DiceRow>,
    pub mean_dice: Option<f64>,
    pub identity_mean_dice: Option<f64>,
    pub endpoint: Option<EndpointError>,
    pub identity_endpoint: Option<EndpointError>,
}

impl RegistrationResult {
    /// Dice of the warped subject labels against the template labels, and endpoint
    /// error against a known field, each alongside the no-registration baseline.
    pub fn evaluate(
        &self,
        subject_labels: &LabelVolume3,
        template_labels: &LabelVolume3,
        gt: Option<&DisplacementField3>,
        mask: Option<&[bool]>,
    ) -> Result<RegistrationMetrics> {
        let warped = crate::volume::warp_labels_nearest(subject_labels, &self.field)?;
        let dice = dice_table(&warped, template_labels)?;
        let identity = dice_table(subject_labels, template_labels)?;
        let (endpoint, identity_endpoint) = match gt {
            Some(g) => (
                Some(endpoint_error(&self.field, g, mask)?),
                Some(endpoint_error(&DisplacementField3::zeros(g.dims()), g, mask)?),
            ),
            None => (None, None),
        };
        Ok(RegistrationMetrics {
            mean_dice: mean_dice(&dice),
            identity_mean_dice: mean_dice(&identity),
            dice,
            endpoint,
            identity_endpoint,
        })
    }
}

/// Predict the full-volume field aligning `subject` to `template` by sliding the
/// model's input window over edge-padded volumes so the output tiles cover every voxel.
pub fn register_volume<T: Real>(model: &Model<T>, template: &Volume3, subject: &Volume3) -> Result<RegistrationResult> {
    let start = Instant::now();
    if template.dims() != subject.dims() {
        return Err(Error::DimMismatch(format!("template {:?} vs subject {:?}", template.dims(), subject.dims())));
    }
    let plan = plan_sizes(64)?;
    let (out, pad, input) = (plan.outputs().0, plan.level_offsets().0, plan.input());
    let dims = template.dims();
    let axes = [tile_origins(dims[0], out)?, tile_origins(dims[1], out)?, tile_origins(dims[2], out)?];
    let (pt, ps) = (pad_edge(template, pad), pad_edge(subject, pad));
    let mut origins = Vec::new();
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                origins.push([x, y, z]);
            }
        }
    }
    let channels = &model.config().input_channels;
    let mut stitcher = Stitcher::new(dims);
    for chunk in origins.chunks(TILE_BATCH) {
        // the padded window starting at `o` yields the output tile at original coordinates `o`
        let items = chunk
            .iter()
            .map(|&o| {
                let s = ps.extract_patch(o, [input; 3])?;
                let t = pt.extract_patch(o, [input; 3])?;
                assemble_input::<T>(&s, &t, channels)
            })
            .collect::<Result<Vec<_>>>()?;
        let pred = model.predict(&stack_batch(&items)?)?;
        for (b, &o) in chunk.iter().enumerate() {
            stitcher.add(o, &tensor_to_field(&pred.high, b)?)?;
        }
    }
    let field = stitcher.finish()?;
    let warped = warp_volume(subject, &field)?;
    let report = TileReport {
        tiles: origins.len(),
        tiles_per_axis: [axes[0].len(), axes[1].len(), axes[2].len()],
        min_coverage: stitcher.min_count(),
        max_overlap_disagreement: stitcher.max_overlap_disagreement(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RegistrationResult { field, warped, report })
}
