use serde::{Deserialize, Serialize};

use crate::volume::{DisplacementField3, LabelVolume3};
use crate::{Error, Result};

/// Overlap of one region in two label volumes: `2|A ∩ B| / (|A| + |B|)`.
/// `None` when the region is absent from both.
pub fn dice(a: &LabelVolume3, b: &LabelVolume3, roi: u16) -> Result<Option<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let (ia, ib) = (x == roi, y == roi);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    Ok((na + nb > 0).then(|| 2.0 * inter as f64 / (na + nb) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub roi: u16,
    pub dice: Option<f64>,
    pub voxels_a: usize,
    pub voxels_b: usize,
}

/// Dice for every region present in either volume, in increasing id order.
pub fn dice_table(a: &LabelVolume3, b: &LabelVolume3) -> Result<Vec<DiceRow>> {
    let mut ids = a.roi_ids();
    ids.extend(b.roi_ids());
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|roi| Ok(DiceRow { roi, dice: dice(a, b, roi)?, voxels_a: a.count(roi), voxels_b: b.count(roi) }))
        .collect()
}

/// Mean over rows with a defined Dice; `None` when there are none.
pub fn mean_dice(rows: &[DiceRow]) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(|r| r.dice).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointError {
    pub mean: f64,
    pub max: f64,
    pub voxels: usize,
}

/// Statistics of `|pred(u) - gt(u)|` over voxels where `mask` is true (all voxels without a mask).
pub fn endpoint_error(pred: &DisplacementField3, gt: &DisplacementField3, mask: Option<&[bool]>) -> Result<EndpointError> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    if let Some(m) = mask {
        if m.len() != pred.voxel_count() {
            return Err(Error::DimMismatch(format!("mask of {} voxels for {:?}", m.len(), pred.dims())));
        }
    }
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for i in 0..pred.voxel_count() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (p, g) = (pred.vector_at(i), gt.vector_at(i));
        let e = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
        sum += e;
        max = max.max(e);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("endpoint error over an empty mask".into()));
    }
    Ok(EndpointError { mean: sum / n as f64, max, voxels: n })
}
