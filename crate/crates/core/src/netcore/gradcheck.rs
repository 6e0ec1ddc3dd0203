use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use super::{seeded_rng, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Scalar objective over a fixed list of input tensors, evaluable at any precision.
pub trait Probe {
    fn inputs(&self) -> Vec<Tensor<f64>>;

    /// Record the objective on `tape`, given leaves holding the inputs, and return its node.
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// Fixed random projection weights scaled by `1/sqrt(n)`, for turning tensor outputs into scalars.
pub fn probe_weights<T: Real>(shape: [usize; 5], seed: u64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut rng = seeded_rng(seed);
    let s = 1.0 / (n.max(1) as f64).sqrt();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z * s)
        })
        .collect();
    Tensor::new(shape, data).expect("probe shape")
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Coordinates probed per input; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
    /// Magnitude below which relative error is measured against this floor instead.
    pub rel_floor: f64,
    /// Absolute slack when flagging one-sided slope disagreement as a kink.
    pub kink_abs: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-6, max_coords: 64, seed: 0, rel_floor: 1e-4, kink_abs: 1e-4 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct InputCheck {
    pub checked: usize,
    /// Coordinates skipped because the objective is not differentiable there.
    pub excluded: usize,
    pub max_rel_err: f64,
    pub worst: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub precision: &'static str,
    pub inputs: Vec<InputCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol && self.inputs.iter().any(|c| c.checked > 0)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradCheck(format!(
                "max relative error {:.3e} exceeds {:.1e} ({})",
                self.max_rel_err, self.tol, self.precision
            )))
        }
    }
}

fn eval_f64<P: Probe>(probe: &P, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = probe.eval(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compare tape gradients computed at precision `T` against central finite differences
/// evaluated in double precision at the same (rounded) inputs.
pub fn grad_check<T: Real, P: Probe>(probe: &P, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let base: Vec<Tensor<f64>> = probe.inputs().iter().map(|t| t.cast::<T>().cast::<f64>()).collect();
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = base.iter().map(|t| tape.param(t.cast())).collect();
    let out = probe.eval(&mut tape, &vars)?;
    tape.backward(out)?;
    let f0 = eval_f64(probe, &base)?;
    let mut rng = seeded_rng(opts.seed);
    let mut inputs = Vec::new();
    let mut max_rel = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let n = base[k].numel();
        let analytic: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.data().iter().map(|x| x.f64()).collect(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> =
            if n <= opts.max_coords { (0..n).collect() } else { sample(&mut rng, n, opts.max_coords).into_vec() };
        let mut rep = InputCheck::default();
        let mut probe_in = base.clone();
        for i in coords {
            let x0 = base[k].data()[i];
            probe_in[k].data_mut()[i] = x0 + opts.h;
            let fp = eval_f64(probe, &probe_in)?;
            probe_in[k].data_mut()[i] = x0 - opts.h;
            let fm = eval_f64(probe, &probe_in)?;
            probe_in[k].data_mut()[i] = x0;
            let fwd = (fp - f0) / opts.h;
            let bwd = (f0 - fm) / opts.h;
            if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()) + opts.kink_abs {
                rep.excluded += 1;
                continue;
            }
            let num = (fp - fm) / (2.0 * opts.h);
            let a = analytic[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(opts.rel_floor);
            rep.checked += 1;
            if rel > rep.max_rel_err || rel.is_nan() {
                rep.max_rel_err = rel;
                rep.worst = Some(i);
            }
        }
        max_rel = if rep.max_rel_err.is_nan() { f64::NAN } else { max_rel.max(rep.max_rel_err) };
        inputs.push(rep);
    }
    Ok(GradCheckReport {
        precision: T::NAME,
        inputs,
        max_rel_err: if max_rel.is_nan() { f64::INFINITY } else { max_rel },
        tol: opts.tol,
    })
}
