//! Naive nested-loop reference implementations, independent of the
//! im2col/GEMM path.
#![allow(dead_code, clippy::too_many_arguments)]

pub fn idx5(s: [usize; 5], n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
    (((n * s[1] + c) * s[2] + d) * s[3] + h) * s[4] + w
}

/// Cross-correlation with zero padding.
pub fn conv3d(x: &[f64], xs: [usize; 5], w: &[f64], cout: usize, k: usize, b: &[f64], stride: usize, pad: usize) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, d, h, wd] = xs;
    let o = |e: usize| (e + 2 * pad - k) / stride + 1;
    let ys = [n, cout, o(d), o(h), o(wd)];
    let mut y = vec![0.0; ys.iter().product()];
    for s in 0..n {
        for co in 0..cout {
            for od in 0..ys[2] {
                for oh in 0..ys[3] {
                    for ow in 0..ys[4] {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (od * stride + kd) as isize - pad as isize;
                                        let ih = (oh * stride + kh) as isize - pad as isize;
                                        let iw = (ow * stride + kw) as isize - pad as isize;
                                        if id < 0 || ih < 0 || iw < 0 || id >= d as isize || ih >= h as isize || iw >= wd as isize {
                                            continue;
                                        }
                                        let xv = x[idx5(xs, s, ci, id as usize, ih as usize, iw as usize)];
                                        let wv = w[(((co * cin + ci) * k + kd) * k + kh) * k + kw];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[idx5(ys, s, co, od, oh, ow)] = acc;
                    }
                }
            }
        }
    }
    (y, ys)
}

/// Transposed convolution by direct scattering: every input voxel `i`
/// contributes `x[i] * w[t]` to output `i * stride - pad + t`.
pub fn deconv3d(x: &[f64], xs: [usize; 5], w: &[f64], cout: usize, k: usize, b: &[f64], stride: usize, pad: usize) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, d, h, wd] = xs;
    let o = |e: usize| (e - 1) * stride + k - 2 * pad;
    let ys = [n, cout, o(d), o(h), o(wd)];
    let mut y = vec![0.0; ys.iter().product()];
    for s in 0..n {
        for co in 0..cout {
            for od in 0..ys[2] {
                for oh in 0..ys[3] {
                    for ow in 0..ys[4] {
                        y[idx5(ys, s, co, od, oh, ow)] = b[co];
                    }
                }
            }
        }
        for ci in 0..cin {
            for id in 0..d {
                for ih in 0..h {
                    for iw in 0..wd {
                        let xv = x[idx5(xs, s, ci, id, ih, iw)];
                        for co in 0..cout {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let od = (id * stride + kd) as isize - pad as isize;
                                        let oh = (ih * stride + kh) as isize - pad as isize;
                                        let ow = (iw * stride + kw) as isize - pad as isize;
                                        if od < 0 || oh < 0 || ow < 0 || od >= ys[2] as isize || oh >= ys[3] as isize || ow >= ys[4] as isize {
                                            continue;
                                        }
                                        let wv = w[(((ci * cout + co) * k + kd) * k + kh) * k + kw];
                                        y[idx5(ys, s, co, od as usize, oh as usize, ow as usize)] += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (y, ys)
}

pub fn maxpool3d(x: &[f64], xs: [usize; 5], k: usize, stride: usize) -> (Vec<f64>, [usize; 5]) {
    let o = |e: usize| (e - k) / stride + 1;
    let ys = [xs[0], xs[1], o(xs[2]), o(xs[3]), o(xs[4])];
    let mut y = vec![0.0; ys.iter().product()];
    for s in 0..ys[0] {
        for c in 0..ys[1] {
            for od in 0..ys[2] {
                for oh in 0..ys[3] {
                    for ow in 0..ys[4] {
                        let mut best = f64::NEG_INFINITY;
                        for a in 0..k {
                            for b in 0..k {
                                for e in 0..k {
                                    best = best.max(x[idx5(xs, s, c, od * stride + a, oh * stride + b, ow * stride + e)]);
                                }
                            }
                        }
                        y[idx5(ys, s, c, od, oh, ow)] = best;
                    }
                }
            }
        }
    }
    (y, ys)
}

/// Batch statistics normalization per channel.
pub fn batchnorm_train(x: &[f64], xs: [usize; 5], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let [n, c, d, h, w] = xs;
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let mut vals = vec![];
        for s in 0..n {
            for a in 0..d {
                for b in 0..h {
                    for e in 0..w {
                        vals.push(x[idx5(xs, s, ch, a, b, e)]);
                    }
                }
            }
        }
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        for s in 0..n {
            for a in 0..d {
                for b in 0..h {
                    for e in 0..w {
                        let i = idx5(xs, s, ch, a, b, e);
                        y[i] = gamma[ch] * (x[i] - mean) / (var + eps).sqrt() + beta[ch];
                    }
                }
            }
        }
    }
    y
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}
