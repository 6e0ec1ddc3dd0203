use serde::{Deserialize, Serialize};

use crate::netcore::{Real, Tape, Tensor, Var};
use crate::par;
use crate::volume::{gradient_magnitude, sample_clamped, sample_clamped_grad, DisplacementField3, Volume3};
use crate::{Error, Result};

/// How the similarity gradient with respect to the predicted displacement is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityScheme {
    /// Exact derivative of the squared error through trilinear interpolation.
    Analytic,
    /// One-voxel forward difference of the absolute error.
    VoxelShift,
}

impl SimilarityScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "voxel_shift" | "voxel-shift" => Ok(Self::VoxelShift),
            _ => Err(Error::Config(format!("unknown similarity scheme `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Analytic => "analytic",
            Self::VoxelShift => "voxel_shift",
        }
    }
}

/// Subject and template input patches, plus their gradient maps when those enter the
/// similarity term.
#[derive(Clone, Debug)]
pub struct SimilarityPatch {
    pub subject: Volume3,
    pub template: Volume3,
    pub gradients: Option<(Volume3, Volume3)>,
}

impl SimilarityPatch {
    pub fn new(subject: Volume3, template: Volume3, use_gradient_channel: bool) -> Result<Self> {
        if subject.dims() != template.dims() {
            return Err(Error::DimMismatch(format!("subject {:?} vs template {:?}", subject.dims(), template.dims())));
        }
        let gradients = if use_gradient_channel {
            Some((gradient_magnitude(&subject)?, gradient_magnitude(&template)?))
        } else {
            None
        };
        Ok(Self { subject, template, gradients })
    }

    fn terms(&self) -> Vec<(&Volume3, &Volume3, f64)> {
        match &self.gradients {
            None => vec![(&self.subject, &self.template, 1.0)],
            Some((gs, gt)) => vec![(&self.subject, &self.template, 0.5), (gs, gt, 0.5)],
        }
    }

    fn offset(&self, out: [usize; 3]) -> Result<usize> {
        let d = self.subject.dims();
        if d[0] != d[1] || d[1] != d[2] || out[0] != out[1] || out[1] != out[2] {
            return Err(Error::Shape(format!("similarity needs cubic grids, got {d:?} and {out:?}")));
        }
        if out[0] > d[0] || (d[0] - out[0]) % 2 != 0 {
            return Err(Error::Shape(format!("prediction {out:?} cannot be centred in patch {d:?}")));
        }
        Ok((d[0] - out[0]) / 2)
    }
}

/// Value of `(1/N) sum_u (S(u + phi(u)) - T(u))^2` over the prediction window, with
/// the gradient-map term averaged in when present.
fn value_and_grad(pred: &DisplacementField3, patch: &SimilarityPatch, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let out = pred.dims();
    let o = patch.offset(out)?;
    let n = out[0];
    let nvox = (n * n * n) as f64;
    let dims = patch.subject.dims();
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; 3 * n * n * n] } else { Vec::new() };
    for (s, t, w) in patch.terms() {
        let (sd, td) = (s.as_slice(), t.as_slice());
        // per-plane partials, summed in plane order below
        let planes = par::map_indexed(n, |k| {
            let mut acc = 0.0;
            let mut g = if want_grad { vec![0.0; 3 * n * n] } else { Vec::new() };
            for j in 0..n {
                for i in 0..n {
                    let d = pred.vector(i, j, k);
                    let u = [i + o, j + o, k + o];
                    let p = [u[0] as f64 + d[0], u[1] as f64 + d[1], u[2] as f64 + d[2]];
                    let tv = td[u[0] + dims[0] * (u[1] + dims[1] * u[2])];
                    if want_grad {
                        let (sv, ds) = sample_clamped_grad(sd, dims, p);
                        let r = sv - tv;
                        acc += r * r;
                        let q = i + n * j;
                        for a in 0..3 {
                            g[a * n * n + q] = 2.0 * r * ds[a];
                        }
                    } else {
                        let r = sample_clamped(sd, dims, p) - tv;
                        acc += r * r;
                    }
                }
            }
            (acc, g)
        });
        let mut sum = 0.0;
        for (k, (acc, g)) in planes.into_iter().enumerate() {
            sum += acc;
            if want_grad {
                for a in 0..3 {
                    let dst = a * n * n * n + k * n * n;
                    for (q, v) in g[a * n * n..(a + 1) * n * n].iter().enumerate() {
                        grad[dst + q] += w * v / nvox;
                    }
                }
            }
        }
        total += w * sum / nvox;
    }
    Ok((total, grad))
}

/// Similarity loss of a centred displacement prediction against a subject/template patch pair.
pub fn loss_m(pred: &DisplacementField3, subject: &Volume3, template: &Volume3, use_gradient_channel: bool) -> Result<f64> {
    let patch = SimilarityPatch::new(subject.clone(), template.clone(), use_gradient_channel)?;
    Ok(value_and_grad(pred, &patch, false)?.0)
}

/// Per-voxel one-voxel forward difference of the absolute warped error along each axis:
/// `|S(u + d + e_a) - T(u)| - |S(u + d) - T(u)|`, unscaled. The shifted position is
/// formed as `u + (d_a + 1)`, the same arithmetic as warping with a field shifted by one.
pub fn voxel_shift_raw(pred: &DisplacementField3, subject: &Volume3, template: &Volume3) -> Result<DisplacementField3> {
    let patch = SimilarityPatch::new(subject.clone(), template.clone(), false)?;
    voxel_shift_term(pred, &patch.subject, &patch.template, patch.offset(pred.dims())?)
}

fn voxel_shift_term(pred: &DisplacementField3, s: &Volume3, t: &Volume3, o: usize) -> Result<DisplacementField3> {
    let dims = s.dims();
    let (sd, td) = (s.as_slice(), t.as_slice());
    DisplacementField3::from_fn(pred.dims(), |i, j, k| {
        let d = pred.vector(i, j, k);
        let u = [i + o, j + o, k + o];
        let tv = td[u[0] + dims[0] * (u[1] + dims[1] * u[2])];
        let base = [u[0] as f64 + d[0], u[1] as f64 + d[1], u[2] as f64 + d[2]];
        let e0 = (sample_clamped(sd, dims, base) - tv).abs();
        let mut out = [0.0; 3];
        for (a, o) in out.iter_mut().enumerate() {
            let mut p = base;
            p[a] = u[a] as f64 + (d[a] + 1.0);
            *o = (sample_clamped(sd, dims, p) - tv).abs() - e0;
        }
        out
    })
}

/// Loss value and its gradient with respect to the prediction under `scheme`.
/// The voxel-shift gradient is the raw difference scaled by `1/N` and by the
/// per-term weight, so both schemes share the normalisation of the loss.
pub fn loss_m_gradient(
    scheme: SimilarityScheme,
    pred: &DisplacementField3,
    patch: &SimilarityPatch,
) -> Result<(f64, DisplacementField3)> {
    match scheme {
        SimilarityScheme::Analytic => {
            let (v, g) = value_and_grad(pred, patch, true)?;
            Ok((v, DisplacementField3::new(pred.dims(), g)?))
        }
        SimilarityScheme::VoxelShift => {
            let (v, _) = value_and_grad(pred, patch, false)?;
            let o = patch.offset(pred.dims())?;
            let nvox = pred.voxel_count() as f64;
            let mut g = vec![0.0; 3 * pred.voxel_count()];
            for (s, t, w) in patch.terms() {
                let raw = voxel_shift_term(pred, s, t, o)?;
                for (gi, r) in g.iter_mut().zip(raw.as_slice()) {
                    *gi += w * r / nvox;
                }
            }
            Ok((v, DisplacementField3::new(pred.dims(), g)?))
        }
    }
}

/// Batch similarity loss on the tape: the mean over batch items of the per-item loss.
/// Returns the node and the per-item values.
pub fn loss_m_batch<T: Real>(
    tape: &mut Tape<T>,
    high: Var,
    patches: &[SimilarityPatch],
    scheme: SimilarityScheme,
) -> Result<(Var, Vec<f64>)> {
    let shape = tape.value(high).shape();
    if shape[0] != patches.len() {
        return Err(Error::Shape(format!("{} similarity patches for batch of {}", patches.len(), shape[0])));
    }
    let nb = patches.len() as f64;
    let mut values = Vec::with_capacity(patches.len());
    let mut grad = Vec::with_capacity(tape.value(high).numel());
    for (b, patch) in patches.iter().enumerate() {
        let pred = super::tensor_to_field(tape.value(high), b)?;
        let (v, g) = loss_m_gradient(scheme, &pred, patch)?;
        values.push(v);
        grad.extend(g.as_slice().iter().map(|&x| T::of(x / nb)));
    }
    let mean = values.iter().sum::<f64>() / nb;
    let var = tape.scalar_with_grad(high, mean, Tensor::new(shape, grad)?)?;
    Ok((var, values))
}
