use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::losses::{loss_m_batch, loss_m_gradient, loss_phi_levels, loss_phi_total, SimilarityPatch, SimilarityScheme};
use crate::netcore::{grad_check, probe_weights, seeded_rng, BnMode, GradCheckOptions, Probe, Real, Tape, Tensor, Var};
use crate::volume::Volume3;
use crate::{Error, Result};

/// Every differentiable operation the self-test covers.
pub const OPS: [&str; 10] = [
    "conv3_valid",
    "conv1",
    "maxpool2",
    "tconv2",
    "batchnorm",
    "relu",
    "concat_center_crop",
    "mse",
    "loss_phi_levels",
    "loss_m",
];

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub precision: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped at non-differentiable points.
    pub excluded: usize,
    pub tol: f64,
    pub passed: bool,
    /// For `loss_m`: relative L2 distance between the analytic and voxel-shift gradients.
    pub scheme_divergence: Option<f64>,
}

fn randn(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

#[derive(Clone, Copy)]
enum Op {
    Conv3,
    Conv1,
    Pool,
    TConv,
    Bn,
    Relu,
    Concat,
    Mse,
}

/// A single layer followed by a fixed random projection to a scalar.
struct LayerProbe {
    op: Op,
    inputs: Vec<Tensor<f64>>,
}

impl Probe for LayerProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.inputs.clone()
    }

    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let y = match self.op {
            Op::Conv3 => t.conv3(v[0], v[1], v[2])?,
            Op::Conv1 => t.conv1(v[0], v[1], v[2])?,
            Op::Pool => t.maxpool2(v[0])?,
            Op::TConv => t.tconv2(v[0], v[1], v[2])?,
            Op::Bn => t.batchnorm(v[0], v[1], v[2], BnMode::Train)?.0,
            Op::Relu => t.relu(v[0]),
            Op::Concat => t.concat_center_crop(v[0], v[1])?,
            Op::Mse => return t.mse(v[0], v[1]),
        };
        let w = probe_weights(t.value(y).shape(), 0x5eed);
        t.dot(y, w)
    }
}

/// Sum of the three level losses against fixed targets.
struct LevelProbe {
    preds: Vec<Tensor<f64>>,
    gts: Vec<Tensor<f64>>,
}

impl Probe for LevelProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.preds.clone()
    }

    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let g: Vec<Tensor<T>> = self.gts.iter().map(|g| g.cast()).collect();
        let lv = loss_phi_levels(t, (v[0], Some(v[1]), Some(v[2])), (&g[0], Some(&g[1]), Some(&g[2])))?;
        loss_phi_total(t, &lv)
    }
}

/// Batch similarity loss as a function of the predicted displacement.
struct SimilarityProbe {
    pred: Tensor<f64>,
    patches: Vec<SimilarityPatch>,
}

impl Probe for SimilarityProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.pred.clone()]
    }

    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        Ok(loss_m_batch(t, v[0], &self.patches, SimilarityScheme::Analytic)?.0)
    }
}

fn smooth_patch(rng: &mut ChaCha8Rng, n: usize) -> Result<Volume3> {
    let (a, b, c): (f64, f64, f64) = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.0..3.0));
    Volume3::from_fn([n; 3], |x, y, z| {
        let (x, y, z) = (x as f64, y as f64, z as f64);
        0.5 + 0.25 * (a * x + c).sin() * (b * y).cos() + 0.2 * (0.3 * z + 0.1 * x - c).sin()
    })
}

fn similarity_setup(seed: u64) -> Result<(Tensor<f64>, Vec<SimilarityPatch>)> {
    let mut rng = seeded_rng(seed);
    let (n, out) = (16, 8);
    let b = rng.random_range(1..=2);
    let mut patches = Vec::new();
    for _ in 0..b {
        patches.push(SimilarityPatch::new(smooth_patch(&mut rng, n)?, smooth_patch(&mut rng, n)?, rng.random())?);
    }
    let len = b * 3 * out * out * out;
    let pred = Tensor::new([b, 3, out, out, out], (0..len).map(|_| rng.random_range(-2.5..2.5)).collect())?;
    Ok((pred, patches))
}

/// Relative L2 distance between the analytic and voxel-shift similarity gradients.
pub fn scheme_divergence(seed: u64) -> Result<f64> {
    let (pred, patches) = similarity_setup(seed)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (b, p) in patches.iter().enumerate() {
        let f = crate::losses::tensor_to_field(&pred, b)?;
        let (_, ga) = loss_m_gradient(SimilarityScheme::Analytic, &f, p)?;
        let (_, gv) = loss_m_gradient(SimilarityScheme::VoxelShift, &f, p)?;
        for (a, v) in ga.as_slice().iter().zip(gv.as_slice()) {
            num += (a - v) * (a - v);
            den += a * a;
        }
    }
    Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
}

fn layer_inputs(op: Op, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let b = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let co = rng.random_range(1..=3);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let s = [dim(3, 5), dim(3, 5), dim(3, 5)];
    let even = [2 * dim(1, 3), 2 * dim(1, 3), 2 * dim(1, 2)];
    let small = [dim(1, 3), dim(1, 3), dim(1, 2)];
    let mut g = |shape: [usize; 5]| randn(rng, shape);
    match op {
        Op::Conv3 => vec![g([b, c, s[0], s[1], s[2]]), g([co, c, 3, 3, 3]), g([1, co, 1, 1, 1])],
        Op::Conv1 => vec![g([b, c, s[0], s[1], s[2]]), g([co, c, 1, 1, 1]), g([1, co, 1, 1, 1])],
        Op::Pool => vec![g([b, c, even[0], even[1], even[2]])],
        Op::TConv => vec![g([b, c, small[0], small[1], small[2]]), g([c, co, 2, 2, 2]), g([1, co, 1, 1, 1])],
        Op::Bn => vec![g([b.max(2), c, s[0], s[1], s[2]]), g([1, c, 1, 1, 1]), g([1, c, 1, 1, 1])],
        Op::Relu => vec![g([b, c, s[0], s[1], s[2]])],
        Op::Concat => vec![g([b, c, s[0] + 2, s[1] + 2, s[2] + 4]), g([b, co, s[0], s[1], s[2]])],
        Op::Mse => vec![g([b, c, s[0], s[1], s[2]]), g([b, c, s[0], s[1], s[2]])],
    }
}

fn summarize(op: &str, seed: u64, precision: &str, tol: f64, r: crate::netcore::GradCheckReport) -> OpCheck {
    OpCheck {
        op: op.to_string(),
        precision: precision.to_string(),
        seed,
        max_rel_err: r.max_rel_err,
        checked: r.inputs.iter().map(|c| c.checked).sum(),
        excluded: r.inputs.iter().map(|c| c.excluded).sum(),
        tol,
        passed: r.passed(),
        scheme_divergence: None,
    }
}

/// Central finite-difference check of one operation on randomized small shapes.
pub fn check_op<T: Real>(op: &str, seed: u64, tol: f64) -> Result<OpCheck> {
    let mut rng = seeded_rng(seed);
    let single = T::NAME == "f32";
    let opts = GradCheckOptions {
        h: if single { 1e-3 } else { 1e-5 },
        tol,
        max_coords: 48,
        seed,
        ..GradCheckOptions::default()
    };
    let layer = |o: Op, rng: &mut ChaCha8Rng| LayerProbe { op: o, inputs: layer_inputs(o, rng) };
    let report = match op {
        "conv3_valid" => grad_check::<T, _>(&layer(Op::Conv3, &mut rng), &opts)?,
        "conv1" => grad_check::<T, _>(&layer(Op::Conv1, &mut rng), &opts)?,
        "maxpool2" => grad_check::<T, _>(&layer(Op::Pool, &mut rng), &opts)?,
        "tconv2" => grad_check::<T, _>(&layer(Op::TConv, &mut rng), &opts)?,
        "batchnorm" => grad_check::<T, _>(&layer(Op::Bn, &mut rng), &opts)?,
        "relu" => grad_check::<T, _>(&layer(Op::Relu, &mut rng), &opts)?,
        "concat_center_crop" => grad_check::<T, _>(&layer(Op::Concat, &mut rng), &opts)?,
        "mse" => grad_check::<T, _>(&layer(Op::Mse, &mut rng), &opts)?,
        "loss_phi_levels" => {
            let b = rng.random_range(1..=2);
            let shapes = [[b, 3, 5, 5, 5], [b, 3, 3, 3, 3], [b, 3, 2, 2, 2]];
            let preds = shapes.iter().map(|&s| randn(&mut rng, s)).collect();
            let gts = shapes.iter().map(|&s| randn(&mut rng, s)).collect();
            grad_check::<T, _>(&LevelProbe { preds, gts }, &opts)?
        }
        "loss_m" => {
            let (pred, patches) = similarity_setup(seed)?;
            // the per-voxel term is quadratic inside an interpolation cell, so a wide step is exact
            let o = GradCheckOptions { h: 1e-3, rel_floor: 1e-9, kink_abs: 1e-9, ..opts.clone() };
            let mut c = summarize(op, seed, T::NAME, tol, grad_check::<T, _>(&SimilarityProbe { pred, patches }, &o)?);
            c.scheme_divergence = Some(scheme_divergence(seed)?);
            return Ok(c);
        }
        _ => {
            return Err(Error::InvalidInput(format!("unknown operation `{op}`; expected `all` or one of {}", OPS.join(", "))))
        }
    };
    Ok(summarize(op, seed, T::NAME, tol, report))
}

/// `ops` is `all` or a single operation name.
pub fn check_ops<T: Real>(ops: &str, seeds: &[u64], tol: f64) -> Result<Vec<OpCheck>> {
    let names: Vec<&str> = if ops == "all" { OPS.to_vec() } else { vec![ops] };
    if let Some(bad) = names.iter().find(|n| !OPS.contains(n)) {
        return Err(Error::InvalidInput(format!("unknown operation `{bad}`; expected `all` or one of {}", OPS.join(", "))));
    }
    let mut out = Vec::new();
    for name in names {
        for &s in seeds {
            out.push(check_op::<T>(name, s, tol)?);
        }
    }
    Ok(out)
}
