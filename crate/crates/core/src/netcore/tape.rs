use super::kernels::{self, ConvGrads};
use super::{Real, Tensor, BN_EPS};
use crate::{par, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics (biased variance) observed in a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv3 { x: Var, w: Var, b: Var },
    Conv1 { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    TConv2 { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { x: Var },
    Crop { x: Var, offset: [usize; 3] },
    ConcatCrop { skip: Var, up: Var, offset: [usize; 3] },
    Mse { a: Var, b: Var },
    Linear { terms: Vec<(Var, f64)> },
    Dot { x: Var, w: Tensor<T> },
    ScalarWithGrad { x: Var, grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of executed operations for one forward/backward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar_shape() -> [usize; 5] {
    [1, 1, 1, 1, 1]
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn check_conv_params(&self, name: &str, x: Var, w: Var, b: Var, w_in_axis: usize, k: usize) -> Result<usize> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let cout = ws[1 - w_in_axis];
        if ws[w_in_axis] != xs[1] {
            return Err(Error::Shape(format!(
                "{name}: kernel expects {} input channels, input has {}",
                ws[w_in_axis], xs[1]
            )));
        }
        if ws[2..] != [k, k, k] {
            return Err(Error::Shape(format!("{name}: kernel spatial shape {:?}, expected {k}^3", &ws[2..])));
        }
        if self.value(b).numel() != cout {
            return Err(Error::Shape(format!("{name}: bias length {} != {cout}", self.value(b).numel())));
        }
        Ok(cout)
    }

    /// Valid 3x3x3 convolution; `w` is `(Cout, Cin, 3, 3, 3)`, `b` has `Cout` entries.
    pub fn conv3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_conv_params("conv3", x, w, b, 1, 3)?;
        if self.value(x).spatial().iter().any(|&s| s < 3) {
            return Err(Error::Shape(format!("conv3: spatial dims {:?} below 3", self.value(x).spatial())));
        }
        let out = kernels::conv3_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, rg, Op::Conv3 { x, w, b }))
    }

    /// Pointwise channel mixing; `w` is `(Cout, Cin, 1, 1, 1)`.
    pub fn conv1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_conv_params("conv1", x, w, b, 1, 1)?;
        let out = kernels::conv1_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, rg, Op::Conv1 { x, w, b }))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let sp = self.value(x).spatial();
        if sp.iter().any(|&s| s % 2 != 0) {
            return Err(Error::Shape(format!("maxpool2: spatial dims {sp:?} must be even")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::MaxPool2 { x, argmax }))
    }

    /// Stride-2 transposed convolution; `w` is `(Cin, Cout, 2, 2, 2)`.
    pub fn tconv2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_conv_params("tconv2", x, w, b, 0, 2)?;
        let out = kernels::tconv2_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, rg, Op::TConv2 { x, w, b }))
    }

    /// Channelwise batch normalisation with affine `gamma`, `beta` (one entry per channel).
    /// In training mode the returned statistics are the batch mean and biased variance.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let c = self.value(x).channels();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "batchnorm: gamma/beta lengths {}/{} for {c} channels",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let (mean, var, stats, train) = match mode {
            BnMode::Train => {
                let (m, v) = kernels::channel_stats(self.value(x));
                (m.clone(), v.clone(), Some(BatchStats { mean: m, var: v }), true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!("batchnorm: running stats length {} for {c} channels", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (y, _) = kernels::normalize(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(y, rg, Op::BatchNorm { x, gamma, beta, mean, inv_std, train });
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut out = Tensor::zeros(src.shape());
        let chunk = src.spatial_len().max(1);
        par::for_each_chunk_mut(out.data_mut(), chunk, |s, o| {
            for (d, &v) in o.iter_mut().zip(&src.data()[s * chunk..]) {
                *d = if v > T::zero() { v } else { T::zero() };
            }
        });
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu { x })
    }

    fn center_offset(big: [usize; 3], small: [usize; 3], what: &str) -> Result<[usize; 3]> {
        let mut off = [0; 3];
        for a in 0..3 {
            if big[a] < small[a] || (big[a] - small[a]) % 2 != 0 {
                return Err(Error::Shape(format!("{what}: cannot centre-crop {big:?} to {small:?}")));
            }
            off[a] = (big[a] - small[a]) / 2;
        }
        Ok(off)
    }

    /// Centred spatial crop to `size`.
    pub fn crop(&mut self, x: Var, size: [usize; 3]) -> Result<Var> {
        let src = self.value(x);
        let offset = Self::center_offset(src.spatial(), size, "crop")?;
        let [nb, nc, ..] = src.shape();
        let (sp, sv) = (src.spatial(), src.spatial_len());
        let dv = size[0] * size[1] * size[2];
        let mut out = Tensor::zeros([nb, nc, size[0], size[1], size[2]]);
        par::for_each_chunk_mut(out.data_mut(), dv, |s, o| {
            kernels::copy_window(&src.data()[s * sv..(s + 1) * sv], sp, o, size, offset);
        });
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Crop { x, offset }))
    }

    /// Centre-crop `skip` to the spatial size of `up` and concatenate as `[skip, up]` on channels.
    pub fn concat_center_crop(&mut self, skip: Var, up: Var) -> Result<Var> {
        let (s, u) = (self.value(skip), self.value(up));
        if s.batch() != u.batch() {
            return Err(Error::Shape(format!("concat: batch {} vs {}", s.batch(), u.batch())));
        }
        let offset = Self::center_offset(s.spatial(), u.spatial(), "concat_center_crop")?;
        let [nb, cs, ..] = s.shape();
        let cu = u.channels();
        let size = u.spatial();
        let (sp, sv, dv) = (s.spatial(), s.spatial_len(), u.spatial_len());
        let mut out = Tensor::zeros([nb, cs + cu, size[0], size[1], size[2]]);
        par::for_each_chunk_mut(out.data_mut(), dv, |k, o| {
            let (b, c) = (k / (cs + cu), k % (cs + cu));
            if c < cs {
                let src = (b * cs + c) * sv;
                kernels::copy_window(&s.data()[src..src + sv], sp, o, size, offset);
            } else {
                o.copy_from_slice(u.slab(b, c - cs));
            }
        });
        let rg = self.rg(skip) || self.rg(up);
        Ok(self.push(out, rg, Op::ConcatCrop { skip, up, offset }))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("mse: shapes {:?} vs {:?}", x.shape(), y.shape())));
        }
        let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p.f64() - q.f64()).powi(2)).sum();
        let v = Tensor::scalar(T::of(s / x.numel() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Mse { a, b }))
    }

    /// `Σ c_i · v_i` over equally shaped tensors.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::InvalidInput("linear: no terms".into()));
        };
        let shape = self.value(first).shape();
        let mut out = vec![T::zero(); self.value(first).numel()];
        for &(v, c) in terms {
            if self.value(v).shape() != shape {
                return Err(Error::Shape(format!("linear: shape {:?} vs {shape:?}", self.value(v).shape())));
            }
            let c = T::of(c);
            for (o, &x) in out.iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Linear { terms: terms.to_vec() }))
    }

    /// Scalar `Σ x · w` for a constant tensor `w`.
    pub fn dot(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != w.shape() {
            return Err(Error::Shape(format!("dot: shapes {:?} vs {:?}", self.value(x).shape(), w.shape())));
        }
        let s: f64 = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a.f64() * b.f64()).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::of(s)), rg, Op::Dot { x, w }))
    }

    /// Scalar computed outside the tape whose gradient with respect to `x` is known.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, grad: Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "scalar_with_grad: gradient shape {:?} vs {:?}",
                grad.shape(),
                self.value(x).shape()
            )));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::of(value)), rg, Op::ScalarWithGrad { x, grad }))
    }

    /// Reverse pass from a scalar node. Afterwards [`Tape::grad`] returns gradients of every
    /// leaf marked as requiring one; intermediate gradients are released as they are consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward: target has shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(scalar_shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, gin) in self.node_backward(i, &g) {
                accumulate(&mut grads[v.0], gin);
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let shape_of = |v: Var| self.value(v).shape();
        let push_conv = |out: &mut Vec<(Var, Tensor<T>)>, grads: ConvGrads<T>, x: Var, w: Var, b: Var| {
            if let Some(gx) = grads.x {
                out.push((x, Tensor::new(shape_of(x), gx).expect("grad shape")));
            }
            if let Some(gw) = grads.w {
                out.push((w, Tensor::new(shape_of(w), gw).expect("grad shape")));
            }
            if let Some(gb) = grads.b {
                out.push((b, Tensor::new(shape_of(b), gb).expect("grad shape")));
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Conv3 { x, w, b } => {
                let need = [self.rg(x), self.rg(w), self.rg(b)];
                let gr = kernels::conv3_backward(self.value(x), self.value(w), g, need);
                push_conv(&mut out, gr, x, w, b);
            }
            &Op::Conv1 { x, w, b } => {
                let need = [self.rg(x), self.rg(w), self.rg(b)];
                let gr = kernels::conv1_backward(self.value(x), self.value(w), g, need);
                push_conv(&mut out, gr, x, w, b);
            }
            &Op::TConv2 { x, w, b } => {
                let need = [self.rg(x), self.rg(w), self.rg(b)];
                let gr = kernels::tconv2_backward(self.value(x), self.value(w), g, need);
                push_conv(&mut out, gr, x, w, b);
            }
            Op::MaxPool2 { x, argmax } => {
                if self.rg(*x) {
                    let gx = kernels::maxpool2_backward(shape_of(*x), argmax, g.data());
                    out.push((*x, Tensor::new(shape_of(*x), gx).expect("grad shape")));
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let xv = self.value(*x);
                let ones = vec![T::one(); mean.len()];
                let zeros = vec![T::zero(); mean.len()];
                let (_, xhat) = kernels::normalize(xv, mean, inv_std, &ones, &zeros);
                let (gx, gg, gbeta) = kernels::batchnorm_backward(
                    xv.shape(),
                    &xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    g.data(),
                    *train,
                );
                if self.rg(*x) {
                    out.push((*x, Tensor::new(xv.shape(), gx).expect("grad shape")));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, Tensor::new(shape_of(*gamma), gg).expect("grad shape")));
                }
                if self.rg(*beta) {
                    out.push((*beta, Tensor::new(shape_of(*beta), gbeta).expect("grad shape")));
                }
            }
            &Op::Relu { x } => {
                let gx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gi, &y)| if y > T::zero() { gi } else { T::zero() })
                    .collect();
                out.push((x, Tensor::new(shape_of(x), gx).expect("grad shape")));
            }
            &Op::Crop { x, offset } => {
                let xs = shape_of(x);
                let big = [xs[2], xs[3], xs[4]];
                let sv = big.iter().product::<usize>();
                let small = g.spatial();
                let dv = g.spatial_len();
                let mut gx = vec![T::zero(); self.value(x).numel()];
                par::for_each_chunk_mut(&mut gx, sv, |s, slab| {
                    kernels::add_window(&g.data()[s * dv..(s + 1) * dv], small, slab, big, offset);
                });
                out.push((x, Tensor::new(xs, gx).expect("grad shape")));
            }
            &Op::ConcatCrop { skip, up, offset } => {
                let ss = shape_of(skip);
                let cs = ss[1];
                let cu = shape_of(up)[1];
                let big = [ss[2], ss[3], ss[4]];
                let sv = big.iter().product::<usize>();
                let small = g.spatial();
                let dv = g.spatial_len();
                if self.rg(skip) {
                    let mut gs = vec![T::zero(); self.value(skip).numel()];
                    par::for_each_chunk_mut(&mut gs, sv, |k, slab| {
                        let (b, c) = (k / cs, k % cs);
                        let src = (b * (cs + cu) + c) * dv;
                        kernels::add_window(&g.data()[src..src + dv], small, slab, big, offset);
                    });
                    out.push((skip, Tensor::new(ss, gs).expect("grad shape")));
                }
                if self.rg(up) {
                    let mut gu = Vec::with_capacity(self.value(up).numel());
                    for b in 0..ss[0] {
                        for c in 0..cu {
                            gu.extend_from_slice(g.slab(b, cs + c));
                        }
                    }
                    out.push((up, Tensor::new(shape_of(up), gu).expect("grad shape")));
                }
            }
            &Op::Mse { a, b } => {
                let (x, y) = (self.value(a), self.value(b));
                let k = T::of(2.0 / x.numel() as f64) * g.item();
                let diff: Vec<T> = x.data().iter().zip(y.data()).map(|(&p, &q)| k * (p - q)).collect();
                if self.rg(b) {
                    let neg = diff.iter().map(|&d| -d).collect();
                    out.push((b, Tensor::new(y.shape(), neg).expect("grad shape")));
                }
                if self.rg(a) {
                    out.push((a, Tensor::new(x.shape(), diff).expect("grad shape")));
                }
            }
            Op::Linear { terms } => {
                for &(v, c) in terms {
                    if self.rg(v) {
                        let k = T::of(c);
                        let gv = g.data().iter().map(|&x| k * x).collect();
                        out.push((v, Tensor::new(g.shape(), gv).expect("grad shape")));
                    }
                }
            }
            Op::Dot { x, w } => {
                let k = g.item();
                let gx = w.data().iter().map(|&v| k * v).collect();
                out.push((*x, Tensor::new(w.shape(), gx).expect("grad shape")));
            }
            Op::ScalarWithGrad { x, grad } => {
                let k = g.item();
                let gx = grad.data().iter().map(|&v| k * v).collect();
                out.push((*x, Tensor::new(grad.shape(), gx).expect("grad shape")));
            }
        }
        out.retain(|(v, _)| self.rg(*v));
        out
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *v;
            }
        }
        None => *slot = Some(g),
    }
}
