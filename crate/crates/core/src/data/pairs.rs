use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::fields::FieldFamily;
use super::{AUGMENTED_TOLERANCE, PAIR_TOLERANCE};
use crate::volume::{
    invert_field, residual_field, scale_field, warp_labels_nearest, warp_volume, DisplacementField3, LabelVolume3,
    Volume3, INVERSION_MAX_ITER, INVERSION_TOL,
};
use crate::{Error, Result};

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// How the target of a fractionally pre-warped subject is defined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentMode {
    /// Solve for the field that exactly completes the partial warp.
    Exact,
    /// Use `(1 - c) * phi`, correct only to first order.
    Naive,
}

impl AugmentMode {
    pub fn name(self) -> &'static str {
        match self {
            AugmentMode::Exact => "exact",
            AugmentMode::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(AugmentMode::Exact),
            "naive" => Ok(AugmentMode::Naive),
            _ => Err(Error::InvalidInput(format!("unknown augmentation mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub family: FieldFamily,
    /// Pre-warp fraction for augmented samples.
    pub fraction: Option<f64>,
    /// Max norm of the perturbation added to the supervision field (0 when clean).
    pub supervision_noise: f64,
    /// Measured `max |warp(S, gt) - T|`.
    pub warp_error: f64,
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub template: Arc<Volume3>,
    pub template_labels: Arc<LabelVolume3>,
    pub subject: Volume3,
    pub subject_labels: LabelVolume3,
    /// Exact deformation: `subject(u + gt_field(u)) = template(u)`.
    pub gt_field: DisplacementField3,
    /// Field the network is trained on, when it differs from `gt_field`.
    pub target: Option<DisplacementField3>,
    pub provenance: Provenance,
}

impl SamplePair {
    pub fn supervision(&self) -> &DisplacementField3 {
        self.target.as_ref().unwrap_or(&self.gt_field)
    }

    /// Replace the supervision with `gt_field + noise`; the exact field is kept for evaluation.
    pub fn with_supervision_noise(mut self, noise: &DisplacementField3) -> Result<Self> {
        self.target = Some(self.gt_field.add(noise)?);
        self.provenance.supervision_noise = noise.max_norm();
        Ok(self)
    }
}

fn warp_error(subject: &Volume3, field: &DisplacementField3, template: &Volume3) -> Result<f64> {
    warp_volume(subject, field)?.max_abs_diff(template)
}

/// Build a subject whose exact deformation to `template` is `phi`, by warping the
/// template with the inverse of `phi`.
pub fn make_pair(
    template: Arc<Volume3>,
    template_labels: Arc<LabelVolume3>,
    phi: DisplacementField3,
    family: FieldFamily,
) -> Result<SamplePair> {
    if template.dims() != phi.dims() || template_labels.dims() != phi.dims() {
        return Err(Error::DimMismatch(format!(
            "template {:?}, labels {:?}, field {:?}",
            template.dims(),
            template_labels.dims(),
            phi.dims()
        )));
    }
    let psi = invert_field(&phi, INVERSION_TOL, INVERSION_MAX_ITER)?.field;
    let subject = warp_volume(&template, &psi)?;
    let subject_labels = warp_labels_nearest(&template_labels, &psi)?;
    let err = warp_error(&subject, &phi, &template)?;
    if err >= PAIR_TOLERANCE {
        return Err(Error::GroundTruth(format!(
            "warp(subject, phi) differs from the template by {err:.4} >= {PAIR_TOLERANCE}"
        )));
    }
    Ok(SamplePair {
        template,
        template_labels,
        subject,
        subject_labels,
        gt_field: phi,
        target: None,
        provenance: Provenance { family, fraction: None, supervision_noise: 0.0, warp_error: err },
    })
}

/// The original pair followed by one pre-warped copy per fraction `c`:
/// the subject is warped by `c * phi` and the target becomes whatever deformation
/// remains. Uses the supervision field, so noisy targets propagate into the copies.
pub fn augment_pair(pair: &SamplePair, fractions: &[f64], mode: AugmentMode) -> Result<Vec<SamplePair>> {
    let phi = pair.supervision();
    let noisy = pair.target.is_some();
    let mut out = Vec::with_capacity(fractions.len() + 1);
    out.push(pair.clone());
    for &c in fractions {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidInput(format!("fraction {c} outside [0, 1]")));
        }
        let pre = scale_field(phi, c)?;
        let subject = warp_volume(&pair.subject, &pre)?;
        let subject_labels = warp_labels_nearest(&pair.subject_labels, &pre)?;
        let target = match mode {
            AugmentMode::Exact => residual_field(phi, c, INVERSION_TOL, INVERSION_MAX_ITER)?.field,
            AugmentMode::Naive => scale_field(phi, 1.0 - c)?,
        };
        let err = warp_error(&subject, &target, &pair.template)?;
        if mode == AugmentMode::Exact && !noisy && err >= AUGMENTED_TOLERANCE {
            return Err(Error::GroundTruth(format!(
                "fraction {c}: warp(subject, target) differs from the template by {err:.4} >= {AUGMENTED_TOLERANCE}"
            )));
        }
        out.push(SamplePair {
            template: pair.template.clone(),
            template_labels: pair.template_labels.clone(),
            subject,
            subject_labels,
            gt_field: target,
            target: None,
            provenance: Provenance {
                family: pair.provenance.family,
                fraction: Some(c),
                supervision_noise: pair.provenance.supervision_noise,
                warp_error: err,
            },
        });
    }
    Ok(out)
}
