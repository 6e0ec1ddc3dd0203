//! Slice-level forward and backward kernels behind the tape operations.
//!
//! Convolutions lower to GEMM through an im2col buffer that covers a block of
//! output z-planes at a time. Work is split across batch items (or channel slabs)
//! only, and cross-item reductions are summed in batch order, so results do not
//! depend on the thread count.

use super::real::gemm;
use super::{Real, Tensor};
use crate::par;

const COLS_BUDGET: usize = 1 << 21;

fn spatial_len(s: [usize; 3]) -> usize {
    s[0] * s[1] * s[2]
}

/// Shapes of a valid 3x3x3 convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv3Geom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3Geom {
    pub fn new(cin: usize, cout: usize, input: [usize; 3]) -> Self {
        Self { cin, cout, input, output: [input[0] - 2, input[1] - 2, input[2] - 2] }
    }

    fn k(&self) -> usize {
        self.cin * 27
    }

    fn z_chunk(&self) -> usize {
        let plane = self.output[0] * self.output[1];
        (COLS_BUDGET / (self.k() * plane).max(1)).clamp(1, self.output[2])
    }
}

/// Fill `cols[K][zn * oy * ox]` for output planes `z0..z0 + zn` of one batch item.
fn im2col<T: Real>(x: &[T], g: &Conv3Geom, z0: usize, zn: usize, cols: &mut [T]) {
    let [ix, iy, _] = g.input;
    let [ox, oy, _] = g.output;
    let iv = spatial_len(g.input);
    let ncols = zn * oy * ox;
    for ci in 0..g.cin {
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let r = ci * 27 + kz * 9 + ky * 3 + kx;
                    let row = &mut cols[r * ncols..(r + 1) * ncols];
                    for zl in 0..zn {
                        for y in 0..oy {
                            let src = ci * iv + (z0 + zl + kz) * iy * ix + (y + ky) * ix + kx;
                            let dst = (zl * oy + y) * ox;
                            row[dst..dst + ox].copy_from_slice(&x[src..src + ox]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `dcols` back onto the input gradient of one batch item.
fn col2im<T: Real>(dcols: &[T], g: &Conv3Geom, z0: usize, zn: usize, gx: &mut [T]) {
    let [ix, iy, _] = g.input;
    let [ox, oy, _] = g.output;
    let iv = spatial_len(g.input);
    let ncols = zn * oy * ox;
    for ci in 0..g.cin {
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let r = ci * 27 + kz * 9 + ky * 3 + kx;
                    let row = &dcols[r * ncols..(r + 1) * ncols];
                    for zl in 0..zn {
                        for y in 0..oy {
                            let dst = ci * iv + (z0 + zl + kz) * iy * ix + (y + ky) * ix + kx;
                            let src = (zl * oy + y) * ox;
                            for (o, &v) in gx[dst..dst + ox].iter_mut().zip(&row[src..src + ox]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let nb = x.batch();
    let g = Conv3Geom::new(x.channels(), w.shape()[0], x.spatial());
    let ov = spatial_len(g.output);
    let iv = spatial_len(g.input);
    let [ox, oy, oz] = g.output;
    let k = g.k();
    let zc = g.z_chunk();
    let mut out = Tensor::zeros([nb, g.cout, ox, oy, oz]);
    par::for_each_chunk_mut(out.data_mut(), g.cout * ov, |b, out_b| {
        for co in 0..g.cout {
            out_b[co * ov..(co + 1) * ov].fill(bias.data()[co]);
        }
        let xb = &x.data()[b * g.cin * iv..(b + 1) * g.cin * iv];
        let mut cols = vec![T::zero(); k * zc * oy * ox];
        let mut z0 = 0;
        while z0 < oz {
            let zn = zc.min(oz - z0);
            let ncols = zn * oy * ox;
            im2col(xb, &g, z0, zn, &mut cols);
            gemm(
                g.cout,
                k,
                ncols,
                T::one(),
                w.data(),
                (k, 1),
                &cols[..k * ncols],
                (ncols, 1),
                T::one(),
                &mut out_b[z0 * oy * ox..],
                (ov, 1),
            );
            z0 += zn;
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

fn sum_in_order<T: Real>(parts: impl Iterator<Item = Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

fn bias_grad<T: Real>(gout: &Tensor<T>) -> Vec<T> {
    let [nb, nc, ..] = gout.shape();
    let mut gb = vec![T::zero(); nc];
    for b in 0..nb {
        for (c, g) in gb.iter_mut().enumerate() {
            let s: f64 = gout.slab(b, c).iter().map(|v| v.f64()).sum();
            *g += T::of(s);
        }
    }
    gb
}

pub(crate) fn conv3_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let nb = x.batch();
    let g = Conv3Geom::new(x.channels(), w.shape()[0], x.spatial());
    let ov = spatial_len(g.output);
    let iv = spatial_len(g.input);
    let [ox, oy, oz] = g.output;
    let k = g.k();
    let zc = g.z_chunk();
    let per_item = par::map_indexed(nb, |b| {
        let xb = &x.data()[b * g.cin * iv..(b + 1) * g.cin * iv];
        let gb = &gout.data()[b * g.cout * ov..(b + 1) * g.cout * ov];
        let mut gx = need[0].then(|| vec![T::zero(); g.cin * iv]);
        let mut gw = need[1].then(|| vec![T::zero(); g.cout * k]);
        let mut cols = vec![T::zero(); if need[1] { k * zc * oy * ox } else { 0 }];
        let mut dcols = vec![T::zero(); if need[0] { k * zc * oy * ox } else { 0 }];
        let mut z0 = 0;
        while z0 < oz {
            let zn = zc.min(oz - z0);
            let ncols = zn * oy * ox;
            let gchunk = &gb[z0 * oy * ox..];
            if let Some(gw) = gw.as_mut() {
                im2col(xb, &g, z0, zn, &mut cols);
                gemm(
                    g.cout,
                    ncols,
                    k,
                    T::one(),
                    gchunk,
                    (ov, 1),
                    &cols[..k * ncols],
                    (1, ncols),
                    T::one(),
                    gw,
                    (k, 1),
                );
            }
            if let Some(gx) = gx.as_mut() {
                gemm(
                    k,
                    g.cout,
                    ncols,
                    T::one(),
                    w.data(),
                    (1, k),
                    gchunk,
                    (ov, 1),
                    T::zero(),
                    &mut dcols[..k * ncols],
                    (ncols, 1),
                );
                col2im(&dcols[..k * ncols], &g, z0, zn, gx);
            }
            z0 += zn;
        }
        (gx, gw)
    });
    let mut gx_all = need[0].then(|| Vec::with_capacity(nb * g.cin * iv));
    let mut gw_parts = Vec::new();
    for (gx, gw) in per_item {
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.extend(gx);
        }
        if let Some(gw) = gw {
            gw_parts.push(gw);
        }
    }
    ConvGrads {
        x: gx_all,
        w: need[1].then(|| sum_in_order(gw_parts.into_iter(), g.cout * k)),
        b: need[2].then(|| bias_grad(gout)),
    }
}

pub(crate) fn conv1_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let [nb, cin, sx, sy, sz] = x.shape();
    let cout = w.shape()[0];
    let v = sx * sy * sz;
    let mut out = Tensor::zeros([nb, cout, sx, sy, sz]);
    par::for_each_chunk_mut(out.data_mut(), cout * v, |b, out_b| {
        for co in 0..cout {
            out_b[co * v..(co + 1) * v].fill(bias.data()[co]);
        }
        let xb = &x.data()[b * cin * v..(b + 1) * cin * v];
        gemm(cout, cin, v, T::one(), w.data(), (cin, 1), xb, (v, 1), T::one(), out_b, (v, 1));
    });
    out
}

pub(crate) fn conv1_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [nb, cin, ..] = x.shape();
    let cout = w.shape()[0];
    let v = x.spatial_len();
    let per_item = par::map_indexed(nb, |b| {
        let xb = &x.data()[b * cin * v..(b + 1) * cin * v];
        let gb = &gout.data()[b * cout * v..(b + 1) * cout * v];
        let gw = need[1].then(|| {
            let mut gw = vec![T::zero(); cout * cin];
            gemm(cout, v, cin, T::one(), gb, (v, 1), xb, (1, v), T::zero(), &mut gw, (cin, 1));
            gw
        });
        let gx = need[0].then(|| {
            let mut gx = vec![T::zero(); cin * v];
            gemm(cin, cout, v, T::one(), w.data(), (1, cin), gb, (v, 1), T::zero(), &mut gx, (v, 1));
            gx
        });
        (gx, gw)
    });
    let mut gx_all = need[0].then(|| Vec::with_capacity(nb * cin * v));
    let mut gw_parts = Vec::new();
    for (gx, gw) in per_item {
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.extend(gx);
        }
        if let Some(gw) = gw {
            gw_parts.push(gw);
        }
    }
    ConvGrads {
        x: gx_all,
        w: need[1].then(|| sum_in_order(gw_parts.into_iter(), cout * cin)),
        b: need[2].then(|| bias_grad(gout)),
    }
}

/// 2x2x2 max pooling. Ties resolve to the first voxel in scan order (x fastest).
/// Returns the output and, per output element, the arg-max offset within its input slab.
pub(crate) fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [nb, nc, ix, iy, iz] = x.shape();
    let [ox, oy, oz] = [ix / 2, iy / 2, iz / 2];
    let ov = ox * oy * oz;
    let slabs = par::map_indexed(nb * nc, |s| {
        let src = &x.data()[s * ix * iy * iz..(s + 1) * ix * iy * iz];
        let mut vals = Vec::with_capacity(ov);
        let mut arg = Vec::with_capacity(ov);
        for z in 0..oz {
            for y in 0..oy {
                for xx in 0..ox {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (2 * xx + dx) + ix * ((2 * y + dy) + iy * (2 * z + dz));
                                if src[i] > best || (dz == 0 && dy == 0 && dx == 0) {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
        (vals, arg)
    });
    let mut data = Vec::with_capacity(nb * nc * ov);
    let mut argmax = Vec::with_capacity(nb * nc * ov);
    for (v, a) in slabs {
        data.extend(v);
        argmax.extend(a);
    }
    (Tensor::new([nb, nc, ox, oy, oz], data).expect("pool shape"), argmax)
}

pub(crate) fn maxpool2_backward<T: Real>(in_shape: [usize; 5], argmax: &[u32], gout: &[T]) -> Vec<T> {
    let [nb, nc, ix, iy, iz] = in_shape;
    let iv = ix * iy * iz;
    let ov = (ix / 2) * (iy / 2) * (iz / 2);
    let mut gx = vec![T::zero(); nb * nc * iv];
    par::for_each_chunk_mut(&mut gx, iv, |s, slab| {
        for j in 0..ov {
            slab[argmax[s * ov + j] as usize] += gout[s * ov + j];
        }
    });
    gx
}

/// Stride-2, kernel-2 transposed convolution; weights are `(Cin, Cout, 2, 2, 2)`.
pub(crate) fn tconv2_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let [nb, cin, ix, iy, iz] = x.shape();
    let cout = w.shape()[1];
    let iv = ix * iy * iz;
    let [ox, oy, oz] = [2 * ix, 2 * iy, 2 * iz];
    let ov = ox * oy * oz;
    let m = cout * 8;
    let mut out = Tensor::zeros([nb, cout, ox, oy, oz]);
    par::for_each_chunk_mut(out.data_mut(), cout * ov, |b, out_b| {
        let xb = &x.data()[b * cin * iv..(b + 1) * cin * iv];
        let mut tmp = vec![T::zero(); m * iv];
        gemm(m, cin, iv, T::one(), w.data(), (1, m), xb, (iv, 1), T::zero(), &mut tmp, (iv, 1));
        for co in 0..cout {
            let bv = bias.data()[co];
            for kk in 0..8 {
                let (kx, ky, kz) = (kk & 1, (kk >> 1) & 1, kk >> 2);
                let row = &tmp[(co * 8 + kk) * iv..(co * 8 + kk + 1) * iv];
                for z in 0..iz {
                    for y in 0..iy {
                        let dst = co * ov + (2 * z + kz) * oy * ox + (2 * y + ky) * ox + kx;
                        let src = (z * iy + y) * ix;
                        for xx in 0..ix {
                            out_b[dst + 2 * xx] = row[src + xx] + bv;
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn tconv2_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [nb, cin, ix, iy, iz] = x.shape();
    let cout = w.shape()[1];
    let iv = ix * iy * iz;
    let [ox, oy] = [2 * ix, 2 * iy];
    let ov = gout.spatial_len();
    let m = cout * 8;
    let per_item = par::map_indexed(nb, |b| {
        let xb = &x.data()[b * cin * iv..(b + 1) * cin * iv];
        let gb = &gout.data()[b * cout * ov..(b + 1) * cout * ov];
        let mut gtmp = vec![T::zero(); m * iv];
        for co in 0..cout {
            for kk in 0..8 {
                let (kx, ky, kz) = (kk & 1, (kk >> 1) & 1, kk >> 2);
                let row = &mut gtmp[(co * 8 + kk) * iv..(co * 8 + kk + 1) * iv];
                for z in 0..iz {
                    for y in 0..iy {
                        let src = co * ov + (2 * z + kz) * oy * ox + (2 * y + ky) * ox + kx;
                        let dst = (z * iy + y) * ix;
                        for xx in 0..ix {
                            row[dst + xx] = gb[src + 2 * xx];
                        }
                    }
                }
            }
        }
        let gw = need[1].then(|| {
            let mut gw = vec![T::zero(); cin * m];
            gemm(cin, iv, m, T::one(), xb, (iv, 1), &gtmp, (1, iv), T::zero(), &mut gw, (m, 1));
            gw
        });
        let gx = need[0].then(|| {
            let mut gx = vec![T::zero(); cin * iv];
            gemm(cin, m, iv, T::one(), w.data(), (m, 1), &gtmp, (iv, 1), T::zero(), &mut gx, (iv, 1));
            gx
        });
        (gx, gw)
    });
    let mut gx_all = need[0].then(|| Vec::with_capacity(nb * cin * iv));
    let mut gw_parts = Vec::new();
    for (gx, gw) in per_item {
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.extend(gx);
        }
        if let Some(gw) = gw {
            gw_parts.push(gw);
        }
    }
    ConvGrads {
        x: gx_all,
        w: need[1].then(|| sum_in_order(gw_parts.into_iter(), cin * m)),
        b: need[2].then(|| bias_grad(gout)),
    }
}

/// Per-channel mean and biased variance over batch and spatial dimensions.
pub(crate) fn channel_stats<T: Real>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [nb, nc, ..] = x.shape();
    let n = (nb * x.spatial_len()) as f64;
    let stats = par::map_indexed(nc, |c| {
        let mut sum = 0.0;
        for b in 0..nb {
            sum += x.slab(b, c).iter().map(|v| v.f64()).sum::<f64>();
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for b in 0..nb {
            sq += x.slab(b, c).iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
        }
        (mean, sq / n)
    });
    stats.into_iter().unzip()
}

/// `y = gamma * (x - mean) * inv_std + beta`, channelwise. Returns `(y, xhat)`.
pub(crate) fn normalize<T: Real>(
    x: &Tensor<T>,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, Vec<T>) {
    let [_, nc, ..] = x.shape();
    let v = x.spatial_len();
    let mut xhat = vec![T::zero(); x.numel()];
    par::for_each_chunk_mut(&mut xhat, v, |s, out| {
        let c = s % nc;
        let (m, is) = (T::of(mean[c]), T::of(inv_std[c]));
        for (o, &xi) in out.iter_mut().zip(&x.data()[s * v..(s + 1) * v]) {
            *o = (xi - m) * is;
        }
    });
    let mut y = vec![T::zero(); x.numel()];
    par::for_each_chunk_mut(&mut y, v, |s, out| {
        let c = s % nc;
        let (g, b) = (gamma[c], beta[c]);
        for (o, &h) in out.iter_mut().zip(&xhat[s * v..(s + 1) * v]) {
            *o = g * h + b;
        }
    });
    (Tensor::new(x.shape(), y).expect("bn shape"), xhat)
}

/// Batch-norm backward. In training mode the statistics depend on `x`; in
/// evaluation mode they are constants.
pub(crate) fn batchnorm_backward<T: Real>(
    shape: [usize; 5],
    xhat: &[T],
    inv_std: &[f64],
    gamma: &[T],
    gout: &[T],
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [nb, nc, ..] = shape;
    let v = shape[2] * shape[3] * shape[4];
    let n = (nb * v) as f64;
    let sums = par::map_indexed(nc, |c| {
        let mut sdy = 0.0;
        let mut sdyx = 0.0;
        for b in 0..nb {
            let s = (b * nc + c) * v;
            for (dy, h) in gout[s..s + v].iter().zip(&xhat[s..s + v]) {
                sdy += dy.f64();
                sdyx += dy.f64() * h.f64();
            }
        }
        (sdy, sdyx)
    });
    let mut gx = vec![T::zero(); gout.len()];
    par::for_each_chunk_mut(&mut gx, v, |s, out| {
        let c = s % nc;
        let g = gamma[c].f64();
        let is = inv_std[c];
        let seg = s * v..(s + 1) * v;
        if train {
            let (sdy, sdyx) = sums[c];
            let k = g * is / n;
            for ((o, dy), h) in out.iter_mut().zip(&gout[seg.clone()]).zip(&xhat[seg.clone()]) {
                *o = T::of(k * (n * dy.f64() - sdy - h.f64() * sdyx));
            }
        } else {
            let k = T::of(g * is);
            for (o, &dy) in out.iter_mut().zip(&gout[seg.clone()]) {
                *o = k * dy;
            }
        }
    });
    let ggamma = sums.iter().map(|&(_, sdyx)| T::of(sdyx)).collect();
    let gbeta = sums.iter().map(|&(sdy, _)| T::of(sdy)).collect();
    (gx, ggamma, gbeta)
}

/// Copy the window of extent `dst_sp` at `offset` out of the slab `src`.
pub(crate) fn copy_window<T: Real>(
    src: &[T],
    src_sp: [usize; 3],
    dst: &mut [T],
    dst_sp: [usize; 3],
    offset: [usize; 3],
) {
    let [sx, sy, _] = src_sp;
    let [dx, dy, dz] = dst_sp;
    for z in 0..dz {
        for y in 0..dy {
            let s = offset[0] + sx * ((offset[1] + y) + sy * (offset[2] + z));
            let d = dx * (y + dy * z);
            dst[d..d + dx].copy_from_slice(&src[s..s + dx]);
        }
    }
}

/// Add a small block `src` (extent `src_sp`) into the large slab `dst` at `offset`.
pub(crate) fn add_window<T: Real>(
    src: &[T],
    src_sp: [usize; 3],
    dst: &mut [T],
    dst_sp: [usize; 3],
    offset: [usize; 3],
) {
    let [sx, sy, sz] = src_sp;
    let [dx, dy, _] = dst_sp;
    for z in 0..sz {
        for y in 0..sy {
            let d = offset[0] + dx * ((offset[1] + y) + dy * (offset[2] + z));
            let s = sx * (y + sy * z);
            for (o, &v) in dst[d..d + sx].iter_mut().zip(&src[s..s + sx]) {
                *o += v;
            }
        }
    }
}
