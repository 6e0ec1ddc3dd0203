use proptest::prelude::*;
use regnet::netcore::{
    grad_check, probe_weights, seeded_rng, Adam, BnMode, GradCheckOptions, Parameter, Probe, Real, Tape, Tensor, Var,
};
use regnet::Result;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: [usize; 5], seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn conv3_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [nb, cin, ix, iy, iz] = x.shape();
    let cout = w.shape()[0];
    Tensor::from_fn([nb, cout, ix - 2, iy - 2, iz - 2], |bi, co, ox, oy, oz| {
        let mut s = b.data()[co];
        for ci in 0..cin {
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        s += w.get(co, ci, kx, ky, kz) * x.get(bi, ci, ox + kx, oy + ky, oz + kz);
                    }
                }
            }
        }
        s
    })
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (p, q)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((p - q).abs() <= tol * (1.0 + q.abs()), "index {i}: {p} vs {q}");
    }
}

#[test]
fn conv3_trivial_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full([1, 1, 3, 3, 3], 1.0));
    let w = t.constant(Tensor::full([1, 1, 3, 3, 3], 1.0));
    let b = t.constant(Tensor::full([1, 1, 1, 1, 1], 0.0));
    let y = t.conv3(x, w, b).unwrap();
    assert_eq!(t.value(y).shape(), [1, 1, 1, 1, 1]);
    assert_eq!(t.value(y).item(), 27.0);

    let x = t.constant(randn([2, 3, 5, 4, 6], 1));
    let w = t.constant(Tensor::zeros([2, 3, 3, 3, 3]));
    let b = t.constant(Tensor::full([1, 2, 1, 1, 1], 5.0));
    let y = t.conv3(x, w, b).unwrap();
    assert_eq!(t.value(y).shape(), [2, 2, 3, 2, 4]);
    assert!(t.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn conv3_matches_loop_oracle() {
    for (shape, cout, seed) in [([1, 2, 5, 5, 5], 3, 2), ([2, 3, 7, 4, 9], 2, 3), ([1, 1, 3, 3, 3], 1, 4)] {
        let x = randn(shape, seed);
        let w = randn([cout, shape[1], 3, 3, 3], seed + 10);
        let b = randn([1, cout, 1, 1, 1], seed + 20);
        let mut t = Tape::<f64>::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv3(xv, wv, bv).unwrap();
        close(t.value(y), &conv3_oracle(&x, &w, &b), 1e-12);
    }
}

#[test]
fn conv3_large_plane_chunking_matches_oracle() {
    // enough channels and planes that the im2col buffer is split across z
    let x = randn([1, 16, 34, 34, 12], 5);
    let w = randn([2, 16, 3, 3, 3], 6);
    let b = randn([1, 2, 1, 1, 1], 7);
    let mut t = Tape::<f64>::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv3(xv, wv, bv).unwrap();
    close(t.value(y), &conv3_oracle(&x, &w, &b), 1e-12);
}

#[test]
fn shape_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros([1, 2, 2, 5, 5]));
    let w = t.constant(Tensor::zeros([1, 2, 3, 3, 3]));
    let w_bad = t.constant(Tensor::zeros([1, 3, 3, 3, 3]));
    let b = t.constant(Tensor::zeros([1, 1, 1, 1, 1]));
    assert!(t.conv3(x, w, b).is_err());
    let x5 = t.constant(Tensor::zeros([1, 2, 5, 5, 5]));
    assert!(t.conv3(x5, w_bad, b).is_err());
    let odd = t.constant(Tensor::zeros([1, 1, 3, 4, 4]));
    assert!(t.maxpool2(odd).is_err());
    let small = t.constant(Tensor::zeros([1, 1, 4, 4, 4]));
    let big = t.constant(Tensor::zeros([1, 1, 6, 6, 6]));
    assert!(t.concat_center_crop(small, big).is_err());
    let g = t.constant(Tensor::zeros([1, 1, 1, 1, 1]));
    assert!(t.batchnorm(x5, g, g, BnMode::Train).is_err());
}

#[test]
fn conv1_examples_and_oracle() {
    let x = randn([2, 2, 3, 4, 2], 8);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let eye = t.constant(Tensor::from_fn([2, 2, 1, 1, 1], |o, i, _, _, _| if o == i { 1.0 } else { 0.0 }));
    let zb = t.constant(Tensor::zeros([1, 2, 1, 1, 1]));
    let y = t.conv1(xv, eye, zb).unwrap();
    assert_eq!(t.value(y).data(), x.data());

    let ones = t.constant(Tensor::full([1, 2, 1, 1, 1], 1.0));
    let zb1 = t.constant(Tensor::zeros([1, 1, 1, 1, 1]));
    let s = t.conv1(xv, ones, zb1).unwrap();
    let expect = Tensor::from_fn([2, 1, 3, 4, 2], |b, _, i, j, k| x.get(b, 0, i, j, k) + x.get(b, 1, i, j, k));
    close(t.value(s), &expect, 1e-15);

    let w = randn([3, 2, 1, 1, 1], 9);
    let bias = randn([1, 3, 1, 1, 1], 10);
    let (wv, bv) = (t.constant(w.clone()), t.constant(bias.clone()));
    let y = t.conv1(xv, wv, bv).unwrap();
    let expect = Tensor::from_fn([2, 3, 3, 4, 2], |b, o, i, j, k| {
        bias.data()[o] + (0..2).map(|c| w.get(o, c, 0, 0, 0) * x.get(b, c, i, j, k)).sum::<f64>()
    });
    close(t.value(y), &expect, 1e-14);
}

#[test]
fn maxpool_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_fn([1, 1, 2, 2, 2], |_, _, i, j, k| (i + 2 * j + 4 * k) as f64));
    let y = t.maxpool2(x).unwrap();
    assert_eq!(t.value(y).item(), 7.0);

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::full([1, 2, 4, 2, 2], 3.0));
    let y = t.maxpool2(x).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 3.0));
    let s = t.dot(y, Tensor::full([1, 2, 2, 1, 1], 1.0)).unwrap();
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap();
    let expect = Tensor::from_fn([1, 2, 4, 2, 2], |_, _, i, j, k| if i % 2 == 0 && j == 0 && k == 0 { 1.0 } else { 0.0 });
    assert_eq!(g.data(), expect.data());
}

#[test]
fn maxpool_matches_block_oracle() {
    let x = randn([2, 3, 6, 4, 8], 11);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let y = t.maxpool2(xv).unwrap();
    let expect = Tensor::from_fn([2, 3, 3, 2, 4], |b, c, i, j, k| {
        let mut m = f64::NEG_INFINITY;
        for d in 0..8 {
            m = m.max(x.get(b, c, 2 * i + (d & 1), 2 * j + ((d >> 1) & 1), 2 * k + (d >> 2)));
        }
        m
    });
    assert_eq!(t.value(y).data(), expect.data());
}

#[test]
fn tconv_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full([1, 1, 1, 1, 1], 2.0));
    let wt = Tensor::from_fn([1, 1, 2, 2, 2], |_, _, i, j, k| (1 + i + 2 * j + 4 * k) as f64);
    let w = t.constant(wt.clone());
    let b = t.constant(Tensor::zeros([1, 1, 1, 1, 1]));
    let y = t.tconv2(x, w, b).unwrap();
    assert_eq!(t.value(y).shape(), [1, 1, 2, 2, 2]);
    let doubled: Vec<f64> = wt.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(t.value(y).data(), &doubled[..]);

    let xs = randn([1, 1, 3, 2, 2], 12);
    let x = t.constant(xs.clone());
    let ones = t.constant(Tensor::full([1, 1, 2, 2, 2], 1.0));
    let y = t.tconv2(x, ones, b).unwrap();
    let expect = Tensor::from_fn([1, 1, 6, 4, 4], |_, _, i, j, k| xs.get(0, 0, i / 2, j / 2, k / 2));
    assert_eq!(t.value(y).data(), expect.data());
}

#[test]
fn tconv_is_adjoint_of_strided_conv() {
    // <tconv(x), y> = <x, conv_s2(y)> where conv_s2 is the kernel-2 stride-2 correlation
    let x = randn([2, 3, 2, 3, 2], 13);
    let w = randn([3, 4, 2, 2, 2], 14);
    let y = randn([2, 4, 4, 6, 4], 15);
    let mut t = Tape::<f64>::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(Tensor::zeros([1, 4, 1, 1, 1])));
    let u = t.tconv2(xv, wv, bv).unwrap();
    let lhs: f64 = t.value(u).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let down = Tensor::from_fn([2, 3, 2, 3, 2], |b, ci, i, j, k| {
        let mut s = 0.0;
        for co in 0..4 {
            for d in 0..8 {
                let (dx, dy, dz) = (d & 1, (d >> 1) & 1, d >> 2);
                s += w.get(ci, co, dx, dy, dz) * y.get(b, co, 2 * i + dx, 2 * j + dy, 2 * k + dz);
            }
        }
        s
    });
    let rhs: f64 = x.data().iter().zip(down.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn batchnorm_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full([2, 1, 3, 3, 3], 4.2));
    let g = t.constant(Tensor::full([1, 1, 1, 1, 1], 1.7));
    let b = t.constant(Tensor::full([1, 1, 1, 1, 1], -0.3));
    let (y, stats) = t.batchnorm(x, g, b, BnMode::Train).unwrap();
    assert!(t.value(y).data().iter().all(|&v| (v + 0.3).abs() < 1e-12));
    let stats = stats.unwrap();
    assert!((stats.mean[0] - 4.2).abs() < 1e-12 && stats.var[0].abs() < 1e-20);

    let xr = randn([3, 2, 4, 3, 5], 16);
    let xv = t.constant(xr);
    let g2 = t.constant(randn([1, 2, 1, 1, 1], 17));
    let b2 = t.constant(randn([1, 2, 1, 1, 1], 18));
    let one = t.constant(Tensor::full([1, 2, 1, 1, 1], 1.0));
    let zero = t.constant(Tensor::zeros([1, 2, 1, 1, 1]));
    let (y, _) = t.batchnorm(xv, one, zero, BnMode::Train).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|b| t.value(y).slab(b, c).to_vec()).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-4, "{m} {v}");
    }
    // normalised input passes through nearly unchanged
    let yv = t.value(y).clone();
    let y2in = t.constant(yv.clone());
    let (y2, _) = t.batchnorm(y2in, one, zero, BnMode::Train).unwrap();
    close(t.value(y2), &yv, 1e-4);
    let mean = [0.5, -1.0];
    let var = [4.0, 0.25];
    let (ye, none) = t.batchnorm(xv, g2, b2, BnMode::Eval { mean: &mean, var: &var }).unwrap();
    assert!(none.is_none());
    let xr = t.value(xv).clone();
    let (gv, bv) = (t.value(g2).clone(), t.value(b2).clone());
    let expect = Tensor::from_fn(xr.shape(), |b, c, i, j, k| {
        gv.data()[c] * (xr.get(b, c, i, j, k) - mean[c]) / (var[c] + 1e-5).sqrt() + bv.data()[c]
    });
    close(t.value(ye), &expect, 1e-12);
}

#[test]
fn relu_crop_concat_mse_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new([1, 1, 3, 1, 1], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = t.dot(y, Tensor::full([1, 1, 3, 1, 1], 1.0)).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let a = t.constant(randn([2, 2, 3, 3, 3], 19));
    let b = t.constant(randn([2, 1, 3, 3, 3], 20));
    let c = t.concat_center_crop(a, b).unwrap();
    for bi in 0..2 {
        assert_eq!(t.value(c).slab(bi, 0), t.value(a).slab(bi, 0));
        assert_eq!(t.value(c).slab(bi, 1), t.value(a).slab(bi, 1));
        assert_eq!(t.value(c).slab(bi, 2), t.value(b).slab(bi, 0));
    }

    let skip = randn([1, 1, 60, 60, 60], 21);
    let s = t.constant(skip.clone());
    let u = t.constant(Tensor::zeros([1, 1, 28, 28, 28]));
    let c = t.concat_center_crop(s, u).unwrap();
    assert_eq!(t.value(c).get(0, 0, 0, 0, 0), skip.get(0, 0, 16, 16, 16));
    assert_eq!(t.value(c).get(0, 0, 27, 5, 9), skip.get(0, 0, 43, 21, 25));

    let p = t.constant(Tensor::full([1, 3, 2, 2, 2], 5.0));
    let q = t.constant(Tensor::full([1, 3, 2, 2, 2], 3.0));
    let m = t.mse(p, q).unwrap();
    assert_eq!(t.value(m).item(), 4.0);
    let m0 = t.mse(p, p).unwrap();
    assert_eq!(t.value(m0).item(), 0.0);
    let pr = randn([2, 3, 2, 3, 2], 22);
    let qr = randn([2, 3, 2, 3, 2], 23);
    let (pv, qv) = (t.constant(pr.clone()), t.constant(qr.clone()));
    let m = t.mse(pv, qv).unwrap();
    let oracle = pr.data().iter().zip(qr.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 72.0;
    assert!((t.value(m).item() - oracle).abs() < 1e-14);
}

// Finite-difference probes -----------------------------------------------------------

struct OpProbe<F> {
    inputs: Vec<Tensor<f64>>,
    f: F,
}

trait Build {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var>;
}

impl<F: Build> Probe for OpProbe<F> {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.inputs.clone()
    }

    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let y = self.f.build(t, v)?;
        let w = probe_weights(t.value(y).shape(), 99);
        t.dot(y, w)
    }
}

struct Conv3Op;
impl Build for Conv3Op {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.conv3(v[0], v[1], v[2])
    }
}
struct Conv1Op;
impl Build for Conv1Op {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.conv1(v[0], v[1], v[2])
    }
}
struct TConvOp;
impl Build for TConvOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.tconv2(v[0], v[1], v[2])
    }
}
struct PoolOp;
impl Build for PoolOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.maxpool2(v[0])
    }
}
struct BnTrainOp;
impl Build for BnTrainOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Train)?.0)
    }
}
struct BnEvalOp;
impl Build for BnEvalOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let (m, s) = ([0.3, -0.2], [1.5, 0.7]);
        Ok(t.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &m, var: &s })?.0)
    }
}
struct ReluOp;
impl Build for ReluOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        Ok(t.relu(v[0]))
    }
}
struct ConcatOp;
impl Build for ConcatOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.concat_center_crop(v[0], v[1])
    }
}
struct CropOp;
impl Build for CropOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.crop(v[0], [2, 3, 1])
    }
}
struct MseOp;
impl Build for MseOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.mse(v[0], v[1])
    }
}
struct LinearOp;
impl Build for LinearOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.linear(&[(v[0], 2.0), (v[1], -0.5)])
    }
}
/// One input feeding two branches whose results are added.
struct FanOutOp;
impl Build for FanOutOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let a = t.conv3(v[0], v[1], v[2])?;
        let b = t.crop(v[0], [3, 3, 3])?;
        let b = t.conv1(b, v[3], v[2])?;
        let a = t.relu(a);
        t.linear(&[(a, 1.0), (b, 1.0)])
    }
}

fn check<F: Build>(f: F, inputs: Vec<Tensor<f64>>) {
    let p = OpProbe { inputs, f };
    let d = grad_check::<f64, _>(&p, &GradCheckOptions::default()).unwrap();
    assert!(d.passed(), "f64: {d:?}");
    let s = grad_check::<f32, _>(&p, &GradCheckOptions { h: 1e-4, tol: 1e-4, ..Default::default() }).unwrap();
    assert!(s.passed(), "f32: {s:?}");
}

#[test]
fn gradcheck_conv3() {
    check(Conv3Op, vec![randn([1, 2, 5, 5, 5], 30), randn([2, 2, 3, 3, 3], 31), randn([1, 2, 1, 1, 1], 32)]);
}

#[test]
fn gradcheck_conv1() {
    check(Conv1Op, vec![randn([2, 3, 2, 3, 2], 33), randn([2, 3, 1, 1, 1], 34), randn([1, 2, 1, 1, 1], 35)]);
}

#[test]
fn gradcheck_tconv2() {
    check(TConvOp, vec![randn([2, 2, 2, 1, 3], 36), randn([2, 3, 2, 2, 2], 37), randn([1, 3, 1, 1, 1], 38)]);
}

#[test]
fn gradcheck_maxpool2() {
    check(PoolOp, vec![randn([2, 2, 4, 2, 4], 39)]);
}

#[test]
fn gradcheck_batchnorm() {
    check(BnTrainOp, vec![randn([2, 2, 3, 2, 3], 40), randn([1, 2, 1, 1, 1], 41), randn([1, 2, 1, 1, 1], 42)]);
    check(BnEvalOp, vec![randn([2, 2, 3, 2, 3], 43), randn([1, 2, 1, 1, 1], 44), randn([1, 2, 1, 1, 1], 45)]);
}

#[test]
fn gradcheck_relu_crop_concat_mse_linear() {
    check(ReluOp, vec![randn([1, 2, 3, 3, 2], 46)]);
    check(CropOp, vec![randn([2, 2, 4, 5, 3], 47)]);
    check(ConcatOp, vec![randn([1, 2, 5, 5, 5], 48), randn([1, 3, 3, 3, 3], 49)]);
    check(MseOp, vec![randn([1, 2, 3, 2, 2], 50), randn([1, 2, 3, 2, 2], 51)]);
    check(LinearOp, vec![randn([1, 1, 2, 2, 2], 52), randn([1, 1, 2, 2, 2], 53)]);
}

#[test]
fn gradcheck_fan_out_accumulates() {
    check(
        FanOutOp,
        vec![randn([1, 2, 5, 5, 5], 54), randn([2, 2, 3, 3, 3], 55), randn([1, 2, 1, 1, 1], 56), randn([2, 2, 1, 1, 1], 57)],
    );
}

#[test]
fn relu_at_zero_is_excluded() {
    let mut x = randn([1, 1, 2, 2, 2], 58);
    x.data_mut()[3] = 0.0;
    let p = OpProbe { inputs: vec![x], f: ReluOp };
    let r = grad_check::<f64, _>(&p, &GradCheckOptions::default()).unwrap();
    assert_eq!(r.inputs[0].excluded, 1);
    assert_eq!(r.inputs[0].checked, 7);
    assert!(r.passed());
}

#[test]
fn linear_probe_is_exact() {
    let p = OpProbe { inputs: vec![randn([1, 1, 3, 1, 1], 59), randn([1, 1, 3, 1, 1], 60)], f: LinearOp };
    let r = grad_check::<f64, _>(&p, &GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_err < 1e-9, "{r:?}");
}

#[test]
fn backward_skips_constants_and_requires_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(randn([1, 1, 4, 4, 4], 61));
    let w = t.param(randn([1, 1, 3, 3, 3], 62));
    let b = t.param(Tensor::zeros([1, 1, 1, 1, 1]));
    let y = t.conv3(x, w, b).unwrap();
    assert!(t.backward(y).is_err());
    let s = t.dot(y, Tensor::full([1, 1, 2, 2, 2], 1.0)).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).is_none());
    assert!(t.grad(w).is_some());
    assert!((t.grad(b).unwrap().item() - 8.0).abs() < 1e-12);
}

#[test]
fn adam_determinism_through_tape() {
    let run = || {
        let mut params = vec![Parameter::new("w", randn([1, 1, 3, 3, 3], 63)), Parameter::new("b", Tensor::zeros([1, 1, 1, 1, 1]))];
        let x = randn([1, 1, 5, 5, 5], 64);
        let target = randn([1, 1, 3, 3, 3], 65);
        let opt = Adam::new(1e-2);
        for _ in 0..4 {
            let mut t = Tape::<f64>::new();
            let xv = t.constant(x.clone());
            let w = t.param(params[0].value.clone());
            let b = t.param(params[1].value.clone());
            let y = t.conv3(xv, w, b).unwrap();
            let tg = t.constant(target.clone());
            let l = t.mse(y, tg).unwrap();
            t.backward(l).unwrap();
            let (gw, gb) = (t.grad(w).unwrap().clone(), t.grad(b).unwrap().clone());
            opt.step(&mut params, &[&gw, &gb]).unwrap();
        }
        params[0].value.data().to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layer_shape_arithmetic(nb in 1usize..3, c in 1usize..3, hx in 2usize..5, hy in 2usize..5, hz in 2usize..5, seed in 0u64..1000) {
        let (sx, sy, sz) = (2 * hx, 2 * hy, 2 * hz);
        let mut t = Tape::<f64>::new();
        let x = t.constant(randn([nb, c, sx, sy, sz], seed));
        let w = t.constant(randn([2, c, 3, 3, 3], seed + 1));
        let b = t.constant(Tensor::zeros([1, 2, 1, 1, 1]));
        let y = t.conv3(x, w, b).unwrap();
        prop_assert_eq!(t.value(y).shape(), [nb, 2, sx - 2, sy - 2, sz - 2]);
        let p = t.maxpool2(x).unwrap();
        prop_assert_eq!(t.value(p).shape(), [nb, c, hx, hy, hz]);
        let wt = t.constant(randn([c, 3, 2, 2, 2], seed + 2));
        let bt = t.constant(Tensor::zeros([1, 3, 1, 1, 1]));
        let u = t.tconv2(p, wt, bt).unwrap();
        prop_assert_eq!(t.value(u).shape(), [nb, 3, sx, sy, sz]);
    }

    #[test]
    fn sequential_and_parallel_agree(seed in 0u64..1000) {
        let x = randn([2, 3, 6, 6, 6], seed);
        let w = randn([4, 3, 3, 3, 3], seed + 1);
        let b = randn([1, 4, 1, 1, 1], seed + 2);
        let run = || {
            let mut t = Tape::<f64>::new();
            let (xv, wv, bv) = (t.param(x.clone()), t.param(w.clone()), t.param(b.clone()));
            let y = t.conv3(xv, wv, bv).unwrap();
            let s = t.dot(y, probe_weights([2, 4, 4, 4, 4], 5)).unwrap();
            t.backward(s).unwrap();
            (t.value(y).clone(), t.grad(wv).unwrap().clone(), t.grad(xv).unwrap().clone())
        };
        let par = run();
        regnet::par::set_sequential(true);
        let seq = run();
        regnet::par::set_sequential(false);
        prop_assert_eq!(par.0.data(), seq.0.data());
        prop_assert_eq!(par.1.data(), seq.1.data());
        prop_assert_eq!(par.2.data(), seq.2.data());
    }
}
