//! Training losses: hierarchical displacement supervision, image similarity after
//! warping, and the staged, normalised combination of the two.

mod similarity;

use serde::{Deserialize, Serialize};

use crate::model::{plan_sizes, SizePlan};
use crate::netcore::{Real, Tape, Tensor, Var};
use crate::volume::{DisplacementField3, ExtractPatch};
use crate::{Error, Result};

pub use similarity::{
    loss_m, loss_m_batch, loss_m_gradient, voxel_shift_raw, SimilarityPatch, SimilarityScheme,
};

/// Ground truth resampled onto the three output grids, with values rescaled to each
/// grid's voxel size.
#[derive(Clone, Debug, PartialEq)]
pub struct GtLevelPatches {
    pub high: DisplacementField3,
    pub mid: DisplacementField3,
    pub low: DisplacementField3,
}

fn cubic_edge(dims: [usize; 3], what: &str) -> Result<usize> {
    if dims[0] != dims[1] || dims[1] != dims[2] {
        return Err(Error::Shape(format!("{what} must be cubic, got {dims:?}")));
    }
    Ok(dims[0])
}

fn subsample(phi: &DisplacementField3, size: usize, stride: usize, offset: usize) -> Result<DisplacementField3> {
    let s = stride as f64;
    DisplacementField3::from_fn([size; 3], |i, j, k| {
        let v = phi.vector(stride * i + offset, stride * j + offset, stride * k + offset);
        [v[0] / s, v[1] / s, v[2] / s]
    })
}

/// Ground-truth targets for every output level of an input-sized field patch.
pub fn extract_gt_level_patches(phi_g: &DisplacementField3) -> Result<GtLevelPatches> {
    let n = cubic_edge(phi_g.dims(), "ground-truth patch")?;
    let plan = plan_sizes(n)?;
    extract_gt_for_plan(phi_g, &plan)
}

pub fn extract_gt_for_plan(phi_g: &DisplacementField3, plan: &SizePlan) -> Result<GtLevelPatches> {
    if phi_g.dims() != [plan.input(); 3] {
        return Err(Error::Shape(format!(
            "ground-truth patch {:?} does not match input size {}",
            phi_g.dims(),
            plan.input()
        )));
    }
    let (h, m, l) = plan.outputs();
    let (oh, om, ol) = plan.level_offsets();
    Ok(GtLevelPatches {
        high: phi_g.extract_patch([oh; 3], [h; 3])?,
        mid: subsample(phi_g, m, 2, om)?,
        low: subsample(phi_g, l, 4, ol)?,
    })
}

pub fn field_to_tensor<T: Real>(f: &DisplacementField3) -> Tensor<T> {
    let d = f.dims();
    Tensor::new([1, 3, d[0], d[1], d[2]], f.as_slice().iter().map(|&v| T::of(v)).collect()).expect("field layout")
}

/// Batch item `b` of a `(B, 3, ...)` tensor as a displacement field.
pub fn tensor_to_field<T: Real>(t: &Tensor<T>, b: usize) -> Result<DisplacementField3> {
    let [_, c, x, y, z] = t.shape();
    if c != 3 {
        return Err(Error::Shape(format!("displacement tensor has {c} channels")));
    }
    let n = x * y * z;
    let data = t.data()[b * 3 * n..(b + 1) * 3 * n].iter().map(|v| v.f64()).collect();
    DisplacementField3::new([x, y, z], data)
}

/// Per-level displacement losses recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LevelLosses {
    pub high: Var,
    pub mid: Option<Var>,
    pub low: Option<Var>,
}

/// Mean squared displacement error per level, each averaged over all `B * 3 * n^3` entries.
/// `gt` holds batched `(B, 3, n, n, n)` targets for each level present in the prediction.
pub fn loss_phi_levels<T: Real>(
    tape: &mut Tape<T>,
    pred: (Var, Option<Var>, Option<Var>),
    gt: (&Tensor<T>, Option<&Tensor<T>>, Option<&Tensor<T>>),
) -> Result<LevelLosses> {
    let level = |tape: &mut Tape<T>, p: Var, g: &Tensor<T>| -> Result<Var> {
        let gv = tape.constant(g.clone());
        tape.mse(p, gv)
    };
    let high = level(tape, pred.0, gt.0)?;
    let mut opt = |p: Option<Var>, g: Option<&Tensor<T>>, name: &str| -> Result<Option<Var>> {
        match (p, g) {
            (Some(p), Some(g)) => Ok(Some(level(tape, p, g)?)),
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::Shape(format!("missing {name} ground truth"))),
        }
    };
    let mid = opt(pred.1, gt.1, "mid")?;
    let low = opt(pred.2, gt.2, "low")?;
    Ok(LevelLosses { high, mid, low })
}

/// Sum of the per-level losses.
pub fn loss_phi_total<T: Real>(tape: &mut Tape<T>, levels: &LevelLosses) -> Result<Var> {
    let mut terms = vec![(levels.high, 1.0)];
    terms.extend(levels.mid.map(|v| (v, 1.0)));
    terms.extend(levels.low.map(|v| (v, 1.0)));
    tape.linear(&terms)
}

/// Mean squared difference between two equally sized fields over all components.
pub fn field_mse(a: &DisplacementField3, b: &DisplacementField3) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let s: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(s / a.as_slice().len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl StageWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && (alpha + beta - 1.0).abs() < 1e-12) {
            return Err(Error::Config(format!("stage weights must be non-negative and sum to 1, got {alpha}/{beta}")));
        }
        Ok(Self { alpha, beta })
    }
}

/// Running-mean loss scales. During warm-up the constants are the mean of every raw
/// loss observed so far, the current one included; afterwards they stay fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub warmup: usize,
    pub count: usize,
    pub sum_phi: f64,
    pub sum_m: f64,
}

/// Constants below this are treated as this, so a vanishing loss cannot divide by zero.
const MIN_SCALE: f64 = 1e-12;

impl Normalizer {
    pub fn new(warmup: usize) -> Self {
        Self { warmup: warmup.max(1), count: 0, sum_phi: 0.0, sum_m: 0.0 }
    }

    pub fn frozen(&self) -> bool {
        self.count >= self.warmup
    }

    pub fn observe(&mut self, raw_phi: f64, raw_m: f64) {
        if !self.frozen() {
            self.count += 1;
            self.sum_phi += raw_phi;
            self.sum_m += raw_m;
        }
    }

    /// `(c_phi, c_m)`.
    pub fn constants(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::NotInitialized("loss normalizer has not observed any loss".into()));
        }
        let n = self.count as f64;
        Ok(((self.sum_phi / n).max(MIN_SCALE), (self.sum_m / n).max(MIN_SCALE)))
    }
}

/// Loss weights per training stage plus the normalisation state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub stage1: StageWeights,
    pub stage2: StageWeights,
    /// Epochs `1..=stage1_epochs` use `stage1`.
    pub stage1_epochs: usize,
    pub normalizer: Normalizer,
}

pub const NORMALIZER_WARMUP: usize = 50;

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            stage1: StageWeights { alpha: 0.8, beta: 0.2 },
            stage2: StageWeights { alpha: 0.5, beta: 0.5 },
            stage1_epochs: 5,
            normalizer: Normalizer::new(NORMALIZER_WARMUP),
        }
    }
}

impl LossSchedule {
    /// Pure displacement supervision in both stages.
    pub fn without_similarity(mut self) -> Self {
        self.stage1 = StageWeights { alpha: 1.0, beta: 0.0 };
        self.stage2 = StageWeights { alpha: 1.0, beta: 0.0 };
        self
    }

    /// Stage index (1 or 2) of a 1-based epoch.
    pub fn stage(&self, epoch: usize) -> usize {
        if epoch <= self.stage1_epochs {
            1
        } else {
            2
        }
    }

    pub fn weights(&self, epoch: usize) -> StageWeights {
        if self.stage(epoch) == 1 {
            self.stage1
        } else {
            self.stage2
        }
    }

    pub fn combine_values(&self, loss_phi: f64, loss_m: f64, epoch: usize) -> Result<f64> {
        let (cp, cm) = self.normalizer.constants()?;
        let w = self.weights(epoch);
        Ok(w.alpha * loss_phi / cp + w.beta * loss_m / cm)
    }

    /// `alpha * loss_phi / c_phi + beta * loss_m / c_m` on the tape.
    pub fn combine<T: Real>(&self, tape: &mut Tape<T>, loss_phi: Var, loss_m: Var, epoch: usize) -> Result<Var> {
        let (cp, cm) = self.normalizer.constants()?;
        let w = self.weights(epoch);
        tape.linear(&[(loss_phi, w.alpha / cp), (loss_m, w.beta / cm)])
    }
}
