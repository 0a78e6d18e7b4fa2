//! Shared machinery for convolution and transposed convolution.
//!
//! Both operators are expressed over one geometry: a "big" grid and a
//! "small" grid related by `big_index = small_index * stride - pad + tap`.
//! A convolution reads big and writes small; a transposed convolution reads
//! small and writes big. Three per-sample kernels cover every forward and
//! backward pass of both:
//!
//! * [`correlate`]: `small = W * im2col(big)`
//! * [`scatter`]: `big += col2im(W^T * small)`
//! * [`weight_grad`]: `dW += small * im2col(big)^T`

use super::gemm::{gemm, MatMut, MatRef};
use super::Element;
use crate::error::{shape_err, Result};

/// Upper bound on the elements of one im2col buffer.
const CHUNK_ELEMS: usize = 1 << 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Geometry of a convolution reading a `input` grid.
    pub fn for_conv(input: [usize; 3], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(shape_err!("kernel and stride must be positive"));
        }
        let mut small = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad;
            if span < k {
                return Err(shape_err!("kernel {k} larger than padded input {span}"));
            }
            if (span - k) % stride != 0 {
                return Err(shape_err!("input {} with pad {pad}, kernel {k} is not divisible by stride {stride}", input[a]));
            }
            small[a] = (span - k) / stride + 1;
        }
        Ok(Self { big: input, small, k, stride, pad })
    }

    /// Geometry of a transposed convolution reading a `input` grid.
    pub fn for_deconv(input: [usize; 3], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(shape_err!("kernel and stride must be positive"));
        }
        let mut big = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * stride + k;
            if input[a] == 0 || full <= 2 * pad {
                return Err(shape_err!("transposed convolution of {} has no output", input[a]));
            }
            big[a] = full - 2 * pad;
        }
        Ok(Self { big, small: input, k, stride, pad })
    }

    pub fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    pub fn big_volume(&self) -> usize {
        self.big.iter().product()
    }

    pub fn small_volume(&self) -> usize {
        self.small.iter().product()
    }

    fn small_plane(&self) -> usize {
        self.small[1] * self.small[2]
    }

    /// Small-grid depth slices handled per im2col buffer.
    fn slices_per_chunk(&self, rows: usize) -> usize {
        (CHUNK_ELEMS / (rows * self.small_plane()).max(1)).clamp(1, self.small[0])
    }

    /// Big-grid coordinate reached from small coordinate `o` through tap `t`.
    #[inline]
    fn reach(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t).checked_sub(self.pad)?;
        (i < extent).then_some(i)
    }

    /// Range of small `o` on the last axis whose unit-stride reach stays inside.
    #[inline]
    fn unit_stride_span(&self, t: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(t);
        let hi = (self.big[2] + self.pad).saturating_sub(t).min(self.small[2]);
        (lo, hi.max(lo))
    }
}

/// Row order is `(channel, td, th, tw)`, matching weight layout.
fn im2col<T: Element>(big: &[T], channels: usize, g: &ConvGeom, d0: usize, d1: usize, cols: &mut [T]) {
    let [bd, bh, bw] = g.big;
    let [_, sh, sw] = g.small;
    let plane = g.small_plane();
    let len = (d1 - d0) * plane;
    let bvol = g.big_volume();
    let k = g.k;
    for c in 0..channels {
        let src = &big[c * bvol..(c + 1) * bvol];
        for td in 0..k {
            for th in 0..k {
                for tw in 0..k {
                    let row = ((c * k + td) * k + th) * k + tw;
                    let dst = &mut cols[row * len..(row + 1) * len];
                    let (lo, hi) = g.unit_stride_span(tw);
                    for (j, od) in (d0..d1).enumerate() {
                        let dplane = &mut dst[j * plane..(j + 1) * plane];
                        let Some(id) = g.reach(od, td, bd) else {
                            dplane.fill(T::zero());
                            continue;
                        };
                        for oh in 0..sh {
                            let drow = &mut dplane[oh * sw..(oh + 1) * sw];
                            let Some(ih) = g.reach(oh, th, bh) else {
                                drow.fill(T::zero());
                                continue;
                            };
                            let srow = &src[(id * bh + ih) * bw..(id * bh + ih + 1) * bw];
                            if g.stride == 1 {
                                drow[..lo].fill(T::zero());
                                drow[hi..].fill(T::zero());
                                if hi > lo {
                                    let s0 = lo + tw - g.pad;
                                    drow[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                                }
                            } else {
                                for (ow, v) in drow.iter_mut().enumerate() {
                                    *v = g.reach(ow, tw, bw).map_or(T::zero(), |iw| srow[iw]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back onto the big grid.
fn col2im<T: Element>(cols: &[T], channels: usize, g: &ConvGeom, d0: usize, d1: usize, big: &mut [T]) {
    let [bd, bh, bw] = g.big;
    let [_, sh, sw] = g.small;
    let plane = g.small_plane();
    let len = (d1 - d0) * plane;
    let bvol = g.big_volume();
    let k = g.k;
    for c in 0..channels {
        let dst = &mut big[c * bvol..(c + 1) * bvol];
        for td in 0..k {
            for th in 0..k {
                for tw in 0..k {
                    let row = ((c * k + td) * k + th) * k + tw;
                    let src = &cols[row * len..(row + 1) * len];
                    let (lo, hi) = g.unit_stride_span(tw);
                    for (j, od) in (d0..d1).enumerate() {
                        let Some(id) = g.reach(od, td, bd) else { continue };
                        let splane = &src[j * plane..(j + 1) * plane];
                        for oh in 0..sh {
                            let Some(ih) = g.reach(oh, th, bh) else { continue };
                            let srow = &splane[oh * sw..(oh + 1) * sw];
                            let drow = &mut dst[(id * bh + ih) * bw..(id * bh + ih + 1) * bw];
                            if g.stride == 1 {
                                if hi > lo {
                                    let d = lo + tw - g.pad;
                                    for (o, &v) in drow[d..d + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                        *o += v;
                                    }
                                }
                            } else {
                                for (ow, &v) in srow.iter().enumerate() {
                                    if let Some(iw) = g.reach(ow, tw, bw) {
                                        drow[iw] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out = w * im2col(big)` for one sample; `w` is `(c_out, c_big * k^3)`.
pub(crate) fn correlate<T: Element>(big: &[T], c_big: usize, g: &ConvGeom, w: &[T], c_out: usize, out: &mut [T]) {
    let rows = c_big * g.taps();
    let plane = g.small_plane();
    let svol = g.small_volume();
    let step = g.slices_per_chunk(rows);
    let mut cols = vec![T::zero(); rows * step * plane];
    let wm = MatRef::rows(w, c_out, rows);
    let mut d0 = 0;
    while d0 < g.small[0] {
        let d1 = (d0 + step).min(g.small[0]);
        let len = (d1 - d0) * plane;
        im2col(big, c_big, g, d0, d1, &mut cols[..rows * len]);
        let c = MatMut::new(&mut out[d0 * plane..], c_out, len, svol, 1);
        gemm(T::one(), wm, MatRef::rows(&cols[..rows * len], rows, len), T::zero(), c);
        d0 = d1;
    }
}

/// `big += col2im(w^T * small)` for one sample; `w` is `(c_small, c_big * k^3)`.
pub(crate) fn scatter<T: Element>(small: &[T], c_small: usize, g: &ConvGeom, w: &[T], c_big: usize, big: &mut [T]) {
    let rows = c_big * g.taps();
    let plane = g.small_plane();
    let svol = g.small_volume();
    let step = g.slices_per_chunk(rows);
    let mut cols = vec![T::zero(); rows * step * plane];
    let wt = MatRef::rows(w, c_small, rows).t();
    let mut d0 = 0;
    while d0 < g.small[0] {
        let d1 = (d0 + step).min(g.small[0]);
        let len = (d1 - d0) * plane;
        let x = MatRef::new(&small[d0 * plane..], c_small, len, svol, 1);
        gemm(T::one(), wt, x, T::zero(), MatMut::rows(&mut cols[..rows * len], rows, len));
        col2im(&cols[..rows * len], c_big, g, d0, d1, big);
        d0 = d1;
    }
}

/// `dw += small * im2col(big)^T` for one sample; `dw` is `(c_small, c_big * k^3)`.
pub(crate) fn weight_grad<T: Element>(
    big: &[T],
    c_big: usize,
    small: &[T],
    c_small: usize,
    g: &ConvGeom,
    dw: &mut [T],
) {
    let rows = c_big * g.taps();
    let plane = g.small_plane();
    let svol = g.small_volume();
    let step = g.slices_per_chunk(rows);
    let mut cols = vec![T::zero(); rows * step * plane];
    let mut d0 = 0;
    while d0 < g.small[0] {
        let d1 = (d0 + step).min(g.small[0]);
        let len = (d1 - d0) * plane;
        im2col(big, c_big, g, d0, d1, &mut cols[..rows * len]);
        let s = MatRef::new(&small[d0 * plane..], c_small, len, svol, 1);
        gemm(T::one(), s, MatRef::rows(&cols[..rows * len], rows, len).t(), T::one(), MatMut::rows(dw, c_small, rows));
        d0 = d1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_shape_formulas() {
        let g = ConvGeom::for_conv([64, 64, 64], 3, 1, 1).unwrap();
        assert_eq!(g.small, [64, 64, 64]);
        let g = ConvGeom::for_deconv([8, 8, 8], 4, 2, 1).unwrap();
        assert_eq!(g.big, [16, 16, 16]);
        assert!(ConvGeom::for_conv([6, 6, 6], 3, 2, 0).is_err());
        assert!(ConvGeom::for_conv([2, 2, 2], 5, 1, 0).is_err());
        assert_eq!(ConvGeom::for_conv([7, 5, 9], 3, 2, 0).unwrap().small, [3, 2, 4]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for any x, c
        for (k, s, p) in [(3, 1, 1), (4, 2, 1), (2, 2, 0), (3, 2, 0)] {
            let g = ConvGeom::for_deconv([3, 2, 4], k, s, p).unwrap();
            let ch = 2;
            let x: Vec<f64> = (0..ch * g.big_volume()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let rows = ch * g.taps();
            let len = g.small_volume();
            let c: Vec<f64> = (0..rows * len).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
            let mut cols = vec![0.0; rows * len];
            im2col(&x, ch, &g, 0, g.small[0], &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&c, ch, &g, 0, g.small[0], &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs, "k={k} s={s} p={p}");
        }
    }
}
