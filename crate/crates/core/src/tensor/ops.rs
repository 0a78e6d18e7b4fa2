//! Forward and backward kernels. Batch-level work is split across samples
//! with rayon; every reduction runs in a fixed order so results do not
//! depend on the thread count.

use super::conv::{correlate, scatter, weight_grad, ConvGeom};
use super::direct;
use super::{Element, Tensor};
use crate::error::{shape_err, Error, Result};
use rayon::prelude::*;

fn check_weight(w: &Tensor<impl Element>, rows: usize, cols: usize, what: &str) -> Result<usize> {
    let s = w.shape();
    if s.len() != 5 || s[2] != s[3] || s[3] != s[4] {
        return Err(shape_err!("{what} weight must be (a, b, k, k, k), got {s:?}"));
    }
    if s[0] != rows || s[1] != cols {
        return Err(shape_err!("{what} weight {s:?} does not match channels ({rows}, {cols})"));
    }
    Ok(s[2])
}

fn check_bias(b: Option<&Tensor<impl Element>>, c: usize) -> Result<()> {
    if let Some(b) = b {
        if b.numel() != c {
            return Err(shape_err!("bias has {} values for {c} channels", b.numel()));
        }
    }
    Ok(())
}

fn add_bias<T: Element>(out: &mut [T], bias: Option<&Tensor<T>>, vol: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(vol).zip(b.data().iter().cycle()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Per-channel sums of a `(N, C, ...)` buffer, ordered over samples.
fn channel_sums<T: Element>(dy: &[T], n: usize, c: usize, vol: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (s * c + ch) * vol;
            *o += dy[start..start + vol].iter().copied().sum::<T>();
        }
    }
    out
}

fn ordered_sum<T: Element>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    acc
}

pub(crate) fn conv3d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let [n, cin, d, h, wd] = x.dims5()?;
    let cout = w.shape().first().copied().unwrap_or(0);
    let k = check_weight(w, cout, cin, "conv3d")?;
    check_bias(b, cout)?;
    let g = ConvGeom::for_conv([d, h, wd], k, stride, pad)?;
    let (bvol, svol) = (g.big_volume(), g.small_volume());
    let mut out = vec![T::zero(); n * cout * svol];
    out.par_chunks_mut(cout * svol).enumerate().for_each(|(s, o)| {
        let xs = &x.data()[s * cin * bvol..(s + 1) * cin * bvol];
        if direct::conv_forward_ok(&g) {
            direct::conv_forward(xs, cin, &g, w.data(), cout, o);
        } else {
            correlate(xs, cin, &g, w.data(), cout, o);
        }
    });
    add_bias(&mut out, b, svol);
    let [sd, sh, sw] = g.small;
    Ok((Tensor::from_vec(&[n, cout, sd, sh, sw], out)?, g))
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn conv3d_backward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom, dy: &[T], need_dx: bool) -> ConvGrads<T> {
    let [n, cin, ..] = x.shape()[..] else { unreachable!() };
    let cout = w.shape()[0];
    let (bvol, svol) = (g.big_volume(), g.small_volume());
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * cin * bvol];
        dx.par_chunks_mut(cin * bvol).enumerate().for_each(|(s, dxs)| {
            let dys = &dy[s * cout * svol..(s + 1) * cout * svol];
            if direct::conv_forward_ok(g) {
                direct::conv_input_grad(dys, cout, g, w.data(), cin, dxs);
            } else {
                scatter(dys, cout, g, w.data(), cin, dxs);
            }
        });
        dx
    });
    let parts: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut dw = vec![T::zero(); w.numel()];
            let xs = &x.data()[s * cin * bvol..(s + 1) * cin * bvol];
            let dys = &dy[s * cout * svol..(s + 1) * cout * svol];
            if direct::conv_forward_ok(g) {
                direct::conv_weight_grad(xs, cin, dys, cout, g, &mut dw);
            } else {
                weight_grad(xs, cin, dys, cout, g, &mut dw);
            }
            dw
        })
        .collect();
    ConvGrads { dx, dw: ordered_sum(parts, w.numel()), db: channel_sums(dy, n, cout, svol) }
}

/// Transposed convolution; `w` is `(C_in, C_out, k, k, k)`.
pub(crate) fn deconv3d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let [n, cin, d, h, wd] = x.dims5()?;
    let cout = w.shape().get(1).copied().unwrap_or(0);
    let k = check_weight(w, cin, cout, "deconv3d")?;
    check_bias(b, cout)?;
    let g = ConvGeom::for_deconv([d, h, wd], k, stride, pad)?;
    let (bvol, svol) = (g.big_volume(), g.small_volume());
    let mut out = vec![T::zero(); n * cout * bvol];
    out.par_chunks_mut(cout * bvol).enumerate().for_each(|(s, o)| {
        let xs = &x.data()[s * cin * svol..(s + 1) * cin * svol];
        if direct::phases_ok(&g) {
            direct::deconv_forward(xs, cin, &g, w.data(), cout, o);
        } else {
            scatter(xs, cin, &g, w.data(), cout, o);
        }
    });
    add_bias(&mut out, b, bvol);
    let [bd, bh, bw] = g.big;
    Ok((Tensor::from_vec(&[n, cout, bd, bh, bw], out)?, g))
}

pub(crate) fn deconv3d_backward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom, dy: &[T], need_dx: bool) -> ConvGrads<T> {
    let [n, cin, ..] = x.shape()[..] else { unreachable!() };
    let cout = w.shape()[1];
    let (bvol, svol) = (g.big_volume(), g.small_volume());
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * cin * svol];
        dx.par_chunks_mut(cin * svol).enumerate().for_each(|(s, dxs)| {
            let dys = &dy[s * cout * bvol..(s + 1) * cout * bvol];
            if direct::phases_ok(g) {
                direct::deconv_input_grad(dys, cout, g, w.data(), cin, dxs);
            } else {
                correlate(dys, cout, g, w.data(), cin, dxs);
            }
        });
        dx
    });
    let parts: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut dw = vec![T::zero(); w.numel()];
            let xs = &x.data()[s * cin * svol..(s + 1) * cin * svol];
            let dys = &dy[s * cout * bvol..(s + 1) * cout * bvol];
            if direct::phases_ok(g) {
                direct::deconv_weight_grad(dys, cout, xs, cin, g, &mut dw);
            } else {
                weight_grad(dys, cout, xs, cin, g, &mut dw);
            }
            dw
        })
        .collect();
    ConvGrads { dx, dw: ordered_sum(parts, w.numel()), db: channel_sums(dy, n, cout, bvol) }
}

/// Max-pooling with cubic window `k` and stride `s`. Returns the output and,
/// per output voxel, the flat in-plane index of the winning input voxel.
/// Ties go to the lowest linear index.
pub(crate) fn maxpool3d<T: Element>(x: &Tensor<T>, k: usize, s: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, d, h, w] = x.dims5()?;
    if k == 0 || s == 0 {
        return Err(shape_err!("pool window and stride must be positive"));
    }
    for e in [d, h, w] {
        if e < k || (e - k) % s != 0 {
            return Err(shape_err!("spatial extent {e} does not tile with window {k}, stride {s}"));
        }
    }
    let (od, oh, ow) = ((d - k) / s + 1, (h - k) / s + 1, (w - k) / s + 1);
    let (ivol, ovol) = (d * h * w, od * oh * ow);
    let mut out = vec![T::zero(); n * c * ovol];
    let mut arg = vec![0u32; n * c * ovol];
    out.par_chunks_mut(ovol)
        .zip(arg.par_chunks_mut(ovol))
        .enumerate()
        .for_each(|(plane, (o, a))| {
            let src = &x.data()[plane * ivol..(plane + 1) * ivol];
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = (z * s * h + y * s) * w + xx * s;
                        for dz in 0..k {
                            for dy in 0..k {
                                let row = ((z * s + dz) * h + y * s + dy) * w + xx * s;
                                for dx in 0..k {
                                    let v = src[row + dx];
                                    if v > best {
                                        best = v;
                                        best_i = row + dx;
                                    }
                                }
                            }
                        }
                        let oi = (z * oh + y) * ow + xx;
                        o[oi] = best;
                        a[oi] = best_i as u32;
                    }
                }
            }
        });
    Ok((Tensor::from_vec(&[n, c, od, oh, ow], out)?, arg))
}

pub(crate) fn maxpool3d_backward<T: Element>(in_shape: &[usize], arg: &[u32], dy: &[T]) -> Vec<T> {
    let ivol: usize = in_shape[2..].iter().product();
    let planes = in_shape[0] * in_shape[1];
    let ovol = dy.len() / planes;
    let mut dx = vec![T::zero(); planes * ivol];
    dx.par_chunks_mut(ivol).enumerate().for_each(|(p, d)| {
        for (g, &i) in dy[p * ovol..(p + 1) * ovol].iter().zip(&arg[p * ovol..(p + 1) * ovol]) {
            d[i as usize] += *g;
        }
    });
    dx
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded into the running estimates.
    pub updates: u64,
}

impl<T: Element> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], updates: 0 }
    }

    /// Marks the zero-mean, unit-variance defaults as usable for inference.
    pub fn assume_identity(&mut self) {
        self.updates = self.updates.max(1);
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    pub fn all_finite(&self) -> bool {
        self.mean.iter().chain(&self.var).all(|v| v.is_finite())
    }
}

/// Saved forward state for batch-norm backward.
pub(crate) struct BnSaved<T> {
    pub mean: Vec<T>,
    pub invstd: Vec<T>,
    pub batch_stats: bool,
}

pub(crate) fn bn_check<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 5]> {
    let dims = x.dims5()?;
    if gamma.numel() != dims[1] || beta.numel() != dims[1] {
        return Err(shape_err!("batch-norm affine parameters must have {} values", dims[1]));
    }
    Ok(dims)
}

/// Per-channel mean and biased variance over `(N, D, H, W)`, in f64.
fn channel_moments<T: Element>(x: &[T], n: usize, c: usize, vol: usize) -> Vec<(f64, f64)> {
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let m = (n * vol) as f64;
            let mut sum = 0.0f64;
            for s in 0..n {
                let start = (s * c + ch) * vol;
                sum += x[start..start + vol].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for s in 0..n {
                let start = (s * c + ch) * vol;
                sq += x[start..start + vol]
                    .iter()
                    .map(|v| {
                        let d = v.to_f64().unwrap_or(f64::NAN) - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            (mean, sq / m)
        })
        .collect()
}

fn bn_apply<T: Element>(x: &Tensor<T>, dims: [usize; 5], gamma: &[T], beta: &[T], mean: &[T], invstd: &[T]) -> Result<Tensor<T>> {
    let [n, c, ..] = dims;
    let vol: usize = dims[2..].iter().product();
    let mut out = x.data().to_vec();
    out.par_chunks_mut(vol).enumerate().for_each(|(plane, o)| {
        let ch = plane % c;
        let scale = gamma[ch] * invstd[ch];
        let shift = beta[ch] - mean[ch] * scale;
        o.iter_mut().for_each(|v| *v = *v * scale + shift);
    });
    debug_assert_eq!(out.len(), n * c * vol);
    Tensor::from_vec(x.shape(), out)
}

/// Training-mode batch norm: normalizes with batch statistics and folds them
/// into `stats` with exponential `momentum`.
pub(crate) fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BatchNormStats<T>,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let dims = bn_check(x, gamma, beta)?;
    let [n, c, ..] = dims;
    let vol: usize = dims[2..].iter().product();
    if stats.mean.len() != c {
        return Err(shape_err!("running statistics hold {} channels, input has {c}", stats.mean.len()));
    }
    let m = n * vol;
    let moments = channel_moments(x.data(), n, c, vol);
    let mean: Vec<T> = moments.iter().map(|&(mu, _)| T::lit(mu)).collect();
    let invstd: Vec<T> = moments.iter().map(|&(_, var)| T::lit(1.0 / (var + eps).sqrt())).collect();
    let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
    for (ch, &(mu, var)) in moments.iter().enumerate() {
        let rm = stats.mean[ch].to_f64().unwrap_or(f64::NAN);
        let rv = stats.var[ch].to_f64().unwrap_or(f64::NAN);
        stats.mean[ch] = T::lit((1.0 - momentum) * rm + momentum * mu);
        stats.var[ch] = T::lit((1.0 - momentum) * rv + momentum * var * unbias);
    }
    stats.updates += 1;
    let y = bn_apply(x, dims, gamma.data(), beta.data(), &mean, &invstd)?;
    Ok((y, BnSaved { mean, invstd, batch_stats: true }))
}

pub(crate) fn batchnorm_infer<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BatchNormStats<T>,
    eps: f64,
    name: &str,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let dims = bn_check(x, gamma, beta)?;
    if !stats.is_initialized() {
        return Err(Error::UninitializedStats(name.to_string()));
    }
    if stats.mean.len() != dims[1] {
        return Err(shape_err!("running statistics hold {} channels, input has {}", stats.mean.len(), dims[1]));
    }
    let invstd: Vec<T> = stats
        .var
        .iter()
        .map(|v| T::lit(1.0 / (v.to_f64().unwrap_or(f64::NAN) + eps).sqrt()))
        .collect();
    let y = bn_apply(x, dims, gamma.data(), beta.data(), &stats.mean, &invstd)?;
    Ok((y, BnSaved { mean: stats.mean.clone(), invstd, batch_stats: false }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_backward<T: Element>(x: &Tensor<T>, gamma: &[T], saved: &BnSaved<T>, dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dims = x.shape();
    let (n, c) = (dims[0], dims[1]);
    let vol: usize = dims[2..].iter().product();
    let m = (n * vol) as f64;
    let xd = x.data();
    let sums: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mu, is) = (saved.mean[ch], saved.invstd[ch]);
            let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
            for s in 0..n {
                let start = (s * c + ch) * vol;
                for (&g, &v) in dy[start..start + vol].iter().zip(&xd[start..start + vol]) {
                    let g = g.to_f64().unwrap_or(f64::NAN);
                    sdy += g;
                    sdyx += g * ((v - mu) * is).to_f64().unwrap_or(f64::NAN);
                }
            }
            (sdy, sdyx)
        })
        .collect();
    let dbeta: Vec<T> = sums.iter().map(|&(a, _)| T::lit(a)).collect();
    let dgamma: Vec<T> = sums.iter().map(|&(_, b)| T::lit(b)).collect();
    let mut dx = vec![T::zero(); xd.len()];
    dx.par_chunks_mut(vol).enumerate().for_each(|(plane, d)| {
        let ch = plane % c;
        let start = plane * vol;
        let (mu, is) = (saved.mean[ch], saved.invstd[ch]);
        let scale = gamma[ch] * is;
        if saved.batch_stats {
            let mean_dy = T::lit(sums[ch].0 / m);
            let mean_dyx = T::lit(sums[ch].1 / m);
            for ((o, &g), &v) in d.iter_mut().zip(&dy[start..start + vol]).zip(&xd[start..start + vol]) {
                let xhat = (v - mu) * is;
                *o = scale * (g - mean_dy - xhat * mean_dyx);
            }
        } else {
            for (o, &g) in d.iter_mut().zip(&dy[start..start + vol]) {
                *o = scale * g;
            }
        }
    });
    (dx, dgamma, dbeta)
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    let one = T::one();
    let s = if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    };
    // keep outputs strictly inside (0, 1) in finite precision
    s.max(T::min_positive_value()).min(one - T::epsilon() / T::lit(2.0))
}

/// Returns `(loss, sum_p, sum_y, sum_py)`; `y` must be binary.
pub(crate) fn dice_loss<T: Element>(p: &Tensor<T>, y: &Tensor<T>, eps: f64) -> Result<(T, f64, f64, f64)> {
    if p.shape() != y.shape() {
        return Err(shape_err!("dice loss shapes differ: {:?} vs {:?}", p.shape(), y.shape()));
    }
    if y.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Domain("dice loss target must be binary".into()));
    }
    let (mut sp, mut sy, mut spy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in p.data().iter().zip(y.data()) {
        let (a, b) = (a.to_f64().unwrap_or(f64::NAN), b.to_f64().unwrap_or(f64::NAN));
        sp += a;
        sy += b;
        spy += a * b;
    }
    let loss = 1.0 - (2.0 * spy + eps) / (sp + sy + eps);
    Ok((T::lit(loss), sp, sy, spy))
}
