use super::{Real, Tensor};
use crate::{Error, Result};

/// Trainable tensor with its Adam moment buffers.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.numel();
        Self { name: name.into(), value, m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Update every parameter with its gradient. All gradients are checked before any
    /// parameter is touched, so a rejected step leaves the state unchanged.
    pub fn step<T: Real>(&self, params: &mut [Parameter<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("adam: {} parameters, {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient shape {:?} for parameter `{}` of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                let max_abs = g.data().iter().map(|v| v.f64().abs()).fold(0.0, |a: f64, b| if b.is_nan() { b } else { a.max(b) });
                return Err(Error::NonFiniteGradient { name: p.name.clone(), max_abs });
            }
        }
        for (p, g) in params.iter_mut().zip(grads) {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            for (((w, m), v), &gi) in p.value.data_mut().iter_mut().zip(&mut p.m).zip(&mut p.v).zip(g.data()) {
                let gi = gi.f64();
                let mn = self.beta1 * m.f64() + (1.0 - self.beta1) * gi;
                let vn = self.beta2 * v.f64() + (1.0 - self.beta2) * gi * gi;
                *m = T::of(mn);
                *v = T::of(vn);
                let upd = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = T::of(w.f64() - upd);
            }
        }
        Ok(())
    }
}
