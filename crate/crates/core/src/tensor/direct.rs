//! Direct (im2col-free) convolution for the shapes the network uses most.
//!
//! Everything reduces to one row kernel over a zero-padded source grid:
//!
//! `out[o0 + co*ocs + l*oes] += sum_ci sum_j w[co][ci][j] * src[ci*cs + base + offs[j] + l]`
//!
//! A stride-1 convolution is that kernel over the padded input. Its input
//! gradient is the same kernel over the padded output gradient with flipped,
//! transposed weights. A strided transposed convolution splits the big grid
//! into `stride^3` phases; within one phase it is again a stride-1 sum.
//!
//! Accumulation uses `mul_add` throughout, so the vectorized and portable
//! paths produce identical bits.

use super::conv::ConvGeom;
use super::Element;

struct Rows<'a, T> {
    src: &'a [T],
    /// Channel stride of `src`.
    cs: usize,
    cin: usize,
    offs: &'a [usize],
    cout: usize,
    /// Weights repacked per output-channel block as `[ci][j][c]`.
    packed: Vec<T>,
}

/// Output channels computed together.
const CB: usize = 4;

impl<'a, T: Element> Rows<'a, T> {
    /// `w` is `(cout, cin, offs.len())`.
    fn new(src: &'a [T], cs: usize, cin: usize, offs: &'a [usize], w: &[T], cout: usize) -> Self {
        let nt = offs.len();
        assert_eq!(w.len(), cout * cin * nt);
        let mut packed = Vec::with_capacity(w.len());
        let mut co0 = 0;
        while co0 < cout {
            let c = if co0 + CB <= cout { CB } else { 1 };
            for ci in 0..cin {
                for j in 0..nt {
                    for cc in 0..c {
                        packed.push(w[((co0 + cc) * cin + ci) * nt + j]);
                    }
                }
            }
            co0 += c;
        }
        Self { src, cs, cin, offs, cout, packed }
    }
}

/// # Safety
/// `src` must hold `cin` channels of stride `cs` covering every
/// `start + offs[j] + L - 1`, and `w` must hold `cin * offs.len() * C` values.
#[inline(always)]
unsafe fn block<T: Element, const C: usize, const L: usize>(
    src: *const T,
    cs: usize,
    cin: usize,
    offs: &[usize],
    w: *const T,
    start: usize,
) -> [[T; L]; C] {
    let mut acc = [[T::zero(); L]; C];
    let nt = offs.len();
    for ci in 0..cin {
        let s0 = src.add(ci * cs + start);
        let wc = w.add(ci * nt * C);
        for (j, &off) in offs.iter().enumerate() {
            let s = s0.add(off);
            let wj = wc.add(j * C);
            for (c, a) in acc.iter_mut().enumerate() {
                let wv = *wj.add(c);
                for (l, v) in a.iter_mut().enumerate() {
                    *v = wv.mul_add(*s.add(l), *v);
                }
            }
        }
    }
    acc
}

#[inline(always)]
fn channels<T: Element, const C: usize, const WIDE: bool>(k: &Rows<T>, co0: usize, w: &[T], base: usize, len: usize, out: &mut [T], at: Placement) {
    let max_off = k.offs.iter().copied().max().unwrap_or(0);
    assert!(k.cin == 0 || (k.cin - 1) * k.cs + base + max_off + len <= k.src.len(), "row kernel source out of range");
    assert!(w.len() >= k.cin * k.offs.len() * C);
    let mut l0 = 0;
    macro_rules! run {
        ($l:literal) => {
            while l0 + $l <= len {
                // SAFETY: bounds asserted above for this row.
                let acc = unsafe { block::<T, C, $l>(k.src.as_ptr(), k.cs, k.cin, k.offs, w.as_ptr(), base + l0) };
                for (c, a) in acc.iter().enumerate() {
                    let o = at.o0 + (co0 + c) * at.ocs + l0 * at.oes;
                    for (l, &v) in a.iter().enumerate() {
                        out[o + l * at.oes] += v;
                    }
                }
                l0 += $l;
            }
        };
    }
    if WIDE {
        run!(32);
    }
    run!(16);
    run!(8);
    run!(1);
}

#[derive(Clone, Copy)]
struct Placement {
    o0: usize,
    ocs: usize,
    oes: usize,
}

#[inline(always)]
fn row_impl<T: Element, const WIDE: bool>(k: &Rows<T>, base: usize, len: usize, out: &mut [T], at: Placement) {
    let per = k.cin * k.offs.len();
    let mut co0 = 0;
    while co0 + CB <= k.cout {
        channels::<T, CB, WIDE>(k, co0, &k.packed[co0 * per..(co0 + CB) * per], base, len, out, at);
        co0 += CB;
    }
    while co0 < k.cout {
        channels::<T, 1, WIDE>(k, co0, &k.packed[co0 * per..(co0 + 1) * per], base, len, out, at);
        co0 += 1;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn row_avx512<T: Element>(k: &Rows<T>, base: usize, len: usize, out: &mut [T], at: Placement) {
    row_impl::<T, true>(k, base, len, out, at)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn row_avx2<T: Element>(k: &Rows<T>, base: usize, len: usize, out: &mut [T], at: Placement) {
    row_impl::<T, false>(k, base, len, out, at)
}

fn row<T: Element>(k: &Rows<T>, base: usize, len: usize, out: &mut [T], at: Placement) {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::is_x86_feature_detected as has;
        if has!("avx512f") && has!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { row_avx512(k, base, len, out, at) };
            return;
        }
        if has!("avx2") && has!("fma") {
            // SAFETY: as above.
            unsafe { row_avx2(k, base, len, out, at) };
            return;
        }
    }
    row_impl::<T, false>(k, base, len, out, at)
}

/// Zero-padded copy of a `(c, d, h, w)` grid with `lo`/`hi` voxels added
/// on each axis; also returns the padded dims.
fn padded<T: Element>(src: &[T], c: usize, dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> (Vec<T>, [usize; 3]) {
    let p: [usize; 3] = std::array::from_fn(|a| dims[a] + lo[a] + hi[a]);
    let (vol, pvol) = (dims.iter().product::<usize>(), p.iter().product::<usize>());
    let mut out = vec![T::zero(); c * pvol];
    for ch in 0..c {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let s = ch * vol + (z * dims[1] + y) * dims[2];
                let d = ch * pvol + ((z + lo[0]) * p[1] + y + lo[1]) * p[2] + lo[2];
                out[d..d + dims[2]].copy_from_slice(&src[s..s + dims[2]]);
            }
        }
    }
    (out, p)
}

fn offset(p: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * p[1] + y) * p[2] + x
}

pub(crate) fn conv_forward_ok(g: &ConvGeom) -> bool {
    g.stride == 1 && g.pad < g.k
}

/// Stride-1 convolution of one sample: `small += W * big`.
pub(crate) fn conv_forward<T: Element>(big: &[T], cin: usize, g: &ConvGeom, w: &[T], cout: usize, small: &mut [T]) {
    debug_assert!(conv_forward_ok(g));
    let (src, p) = padded(big, cin, g.big, [g.pad; 3], [g.pad; 3]);
    let k = g.k;
    let offs: Vec<usize> =
        (0..k * k * k).map(|t| offset(p, t / (k * k), (t / k) % k, t % k)).collect();
    let rows = Rows::new(&src, p.iter().product(), cin, &offs, w, cout);
    let [sd, sh, sw] = g.small;
    let at = |z, y| Placement { o0: (z * sh + y) * sw, ocs: sd * sh * sw, oes: 1 };
    for z in 0..sd {
        for y in 0..sh {
            row(&rows, offset(p, z, y, 0), sw, small, at(z, y));
        }
    }
}

/// Input gradient of a stride-1 convolution for one sample:
/// `big += W^T * small`, computed as a correlation with flipped kernels.
pub(crate) fn conv_input_grad<T: Element>(small: &[T], cout: usize, g: &ConvGeom, w: &[T], cin: usize, big: &mut [T]) {
    debug_assert!(conv_forward_ok(g));
    let k = g.k;
    let taps = k * k * k;
    let q = k - 1 - g.pad;
    let (src, p) = padded(small, cout, g.small, [q; 3], [q; 3]);
    let mut wt = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                wt[(ci * cout + co) * taps + t] = w[(co * cin + ci) * taps + taps - 1 - t];
            }
        }
    }
    let offs: Vec<usize> = (0..taps).map(|t| offset(p, t / (k * k), (t / k) % k, t % k)).collect();
    let rows = Rows::new(&src, p.iter().product(), cout, &offs, &wt, cin);
    let [bd, bh, bw] = g.big;
    for z in 0..bd {
        for y in 0..bh {
            row(&rows, offset(p, z, y, 0), bw, big, Placement { o0: (z * bh + y) * bw, ocs: bd * bh * bw, oes: 1 });
        }
    }
}

pub(crate) fn phases_ok(g: &ConvGeom) -> bool {
    (0..3).all(|a| g.big[a] % g.stride == 0 && g.big[a] / g.stride == g.small[a]) && g.k >= g.stride
}

/// Taps reaching big-grid phase `r` and their small-grid shifts: big index
/// `s*q + r` reads small index `q + shift` through tap `t`.
fn phase_taps(g: &ConvGeom, r: usize) -> Vec<(usize, isize)> {
    let s = g.stride as isize;
    (0..g.k)
        .filter_map(|t| {
            let num = r as isize + g.pad as isize - t as isize;
            (num.rem_euclid(s) == 0).then_some((t, num.div_euclid(s)))
        })
        .collect()
}

struct PhasePlan {
    /// Per axis, per phase: taps and shifts.
    taps: [Vec<Vec<(usize, isize)>>; 3],
    lo: [usize; 3],
    hi: [usize; 3],
}

fn phase_plan(g: &ConvGeom) -> PhasePlan {
    let taps: [Vec<Vec<(usize, isize)>>; 3] = std::array::from_fn(|_| (0..g.stride).map(|r| phase_taps(g, r)).collect());
    let shifts = || taps[0].iter().flatten().map(|&(_, d)| d);
    let (min, max) = (shifts().min().unwrap_or(0), shifts().max().unwrap_or(0));
    PhasePlan { lo: [(-min).max(0) as usize; 3], hi: [max.max(0) as usize; 3], taps }
}

/// Phase tap list in `(tz, ty, tx)` order: flat weight taps and offsets
/// `lo + sign * shift` into a grid padded by `lo`.
fn phase_offsets(plan: &PhasePlan, k: usize, p: [usize; 3], r: [usize; 3], lo: [usize; 3], sign: isize) -> (Vec<usize>, Vec<usize>) {
    let mut taps = Vec::new();
    let mut offs = Vec::new();
    let at = |a: usize, d: isize| (lo[a] as isize + sign * d) as usize;
    for &(tz, dz) in &plan.taps[0][r[0]] {
        for &(ty, dy) in &plan.taps[1][r[1]] {
            for &(tx, dx) in &plan.taps[2][r[2]] {
                taps.push((tz * k + ty) * k + tx);
                offs.push(offset(p, at(0, dz), at(1, dy), at(2, dx)));
            }
        }
    }
    (taps, offs)
}

/// Transposed convolution of one sample, `big += col2im(W^T * small)`, with
/// `w` laid out `(c_small, c_big, k^3)`.
pub(crate) fn deconv_forward<T: Element>(small: &[T], cin: usize, g: &ConvGeom, w: &[T], cout: usize, big: &mut [T]) {
    debug_assert!(phases_ok(g));
    let plan = phase_plan(g);
    let (src, p) = padded(small, cin, g.small, plan.lo, plan.hi);
    let taps3 = g.taps();
    let s = g.stride;
    let [bd, bh, bw] = g.big;
    let [sd, sh, sw] = g.small;
    for rz in 0..s {
        for ry in 0..s {
            for rx in 0..s {
                let (taps, offs) = phase_offsets(&plan, g.k, p, [rz, ry, rx], plan.lo, 1);
                if taps.is_empty() {
                    continue;
                }
                let nt = taps.len();
                let mut wp = vec![T::zero(); cout * cin * nt];
                for co in 0..cout {
                    for ci in 0..cin {
                        for (j, &t) in taps.iter().enumerate() {
                            wp[(co * cin + ci) * nt + j] = w[(ci * cout + co) * taps3 + t];
                        }
                    }
                }
                let rows = Rows::new(&src, p.iter().product(), cin, &offs, &wp, cout);
                for qz in 0..sd {
                    for qy in 0..sh {
                        let o0 = ((s * qz + rz) * bh + s * qy + ry) * bw + rx;
                        row(&rows, offset(p, qz, qy, 0), sw, big, Placement { o0, ocs: bd * bh * bw, oes: s });
                    }
                }
            }
        }
    }
}

/// Input gradient of a transposed convolution for one sample:
/// `small += W * im2col(big)` with `w` laid out `(c_small, c_big, k^3)`.
///
/// Big index `s*q + r` reads small index `q + shift`, so small index `i`
/// collects phase `r` of the big grid at `q = i - shift`; the phase grids are
/// padded by the mirrored amounts.
pub(crate) fn deconv_input_grad<T: Element>(big: &[T], cout: usize, g: &ConvGeom, w: &[T], cin: usize, small: &mut [T]) {
    debug_assert!(phases_ok(g));
    let plan = phase_plan(g);
    let (lo, hi) = (plan.hi, plan.lo);
    let s = g.stride;
    let [_, bh, bw] = g.big;
    let [sd, sh, sw] = g.small;
    let bvol = g.big_volume();
    let svol = g.small_volume();
    let taps3 = g.taps();
    let mut grid = vec![T::zero(); cout * svol];
    for rz in 0..s {
        for ry in 0..s {
            for rx in 0..s {
                let p: [usize; 3] = std::array::from_fn(|a| g.small[a] + lo[a] + hi[a]);
                let (taps, offs) = phase_offsets(&plan, g.k, p, [rz, ry, rx], lo, -1);
                if taps.is_empty() {
                    continue;
                }
                for co in 0..cout {
                    for qz in 0..sd {
                        for qy in 0..sh {
                            let src = co * bvol + ((s * qz + rz) * bh + s * qy + ry) * bw + rx;
                            let dst = co * svol + (qz * sh + qy) * sw;
                            for (qx, d) in grid[dst..dst + sw].iter_mut().enumerate() {
                                *d = big[src + s * qx];
                            }
                        }
                    }
                }
                let (src, p2) = padded(&grid, cout, g.small, lo, hi);
                debug_assert_eq!(p, p2);
                let nt = taps.len();
                let mut wp = vec![T::zero(); cin * cout * nt];
                for ci in 0..cin {
                    for co in 0..cout {
                        for (j, &t) in taps.iter().enumerate() {
                            wp[(ci * cout + co) * nt + j] = w[(ci * cout + co) * taps3 + t];
                        }
                    }
                }
                let rows = Rows::new(&src, p.iter().product(), cout, &offs, &wp, cin);
                for z in 0..sd {
                    for y in 0..sh {
                        row(&rows, offset(p, z, y, 0), sw, small, Placement { o0: (z * sh + y) * sw, ocs: svol, oes: 1 });
                    }
                }
            }
        }
    }
}

/// Weight-gradient reduction over rows:
/// `out[co][ci][j] += sum_rows sum_l dy[co*dcs + drow + l] * src[ci*cs + srow + offs[j] + l]`.
struct GradRows<'a, T> {
    src: &'a [T],
    cs: usize,
    csrc: usize,
    offs: &'a [usize],
    dy: &'a [T],
    dcs: usize,
    cdy: usize,
    len: usize,
    isa: Isa,
}

/// Explicit-intrinsic kernel usable for the hot gradient block.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Isa {
    Portable,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

impl Isa {
    fn detect<T: Element>() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::is_x86_feature_detected as has;
            if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() && has!("fma") {
                if has!("avx512f") {
                    return Isa::Avx512;
                }
                if has!("avx2") {
                    return Isa::Avx2;
                }
            }
        }
        Isa::Portable
    }
}

/// Rows swept per register pass.
const ROW_TILE: usize = 64;

/// # Safety
/// Every `(srow, drow)` must keep `src` and `dy` reads of `L` lanes from
/// `l0` in bounds for the channels and taps touched.
#[inline(always)]
unsafe fn grad_block<T: Element, const C: usize, const TB: usize, const L: usize>(
    k: &GradRows<T>,
    rows: &[(usize, usize)],
    co0: usize,
    ci: usize,
    t0: usize,
    l0: usize,
) -> [[[T; L]; TB]; C] {
    let mut acc = [[[T::zero(); L]; TB]; C];
    let src = k.src.as_ptr();
    let dy = k.dy.as_ptr();
    for &(sb, db) in rows {
        let s0 = src.add(ci * k.cs + sb + l0);
        let d0 = dy.add(db + l0 + co0 * k.dcs);
        for (c, per_t) in acc.iter_mut().enumerate() {
            let d = d0.add(c * k.dcs);
            for (tb, a) in per_t.iter_mut().enumerate() {
                let s = s0.add(*k.offs.get_unchecked(t0 + tb));
                for (l, v) in a.iter_mut().enumerate() {
                    *v = (*d.add(l)).mul_add(*s.add(l), *v);
                }
            }
        }
    }
    acc
}

/// The `(CB, 2, GL)` block of `grad_block` for `f32`, with the same per-lane
/// accumulation order.
///
/// # Safety
/// As `grad_block`; additionally `T` must be `f32` and `k.isa` supported.
#[inline(always)]
unsafe fn grad_block_f32<T: Element, const C: usize, const TB: usize, const L: usize>(
    k: &GradRows<T>,
    rows: &[(usize, usize)],
    co0: usize,
    ci: usize,
    t0: usize,
    l0: usize,
) -> [[[T; L]; TB]; C] {
    debug_assert!(C == CB && TB == 2 && L == GL);
    let src = k.src.as_ptr() as *const f32;
    let dy = k.dy.as_ptr() as *const f32;
    let (o0, o1) = (k.offs[t0], k.offs[t0 + 1]);
    let mut out = [[[T::zero(); L]; TB]; C];
    #[cfg(target_arch = "x86_64")]
    {
        let res = match k.isa {
            Isa::Avx512 => grad_f32_avx512(src, k.cs, dy, k.dcs, rows, ci, co0, l0, o0, o1),
            Isa::Avx2 => grad_f32_avx2(src, k.cs, dy, k.dcs, rows, ci, co0, l0, o0, o1),
            Isa::Portable => unreachable!(),
        };
        std::ptr::copy_nonoverlapping(res.as_ptr() as *const T, out.as_mut_ptr() as *mut T, C * TB * L);
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = (src, dy, o0, o1, rows, ci, co0, l0);
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn grad_f32_avx512(
    src: *const f32,
    cs: usize,
    dy: *const f32,
    dcs: usize,
    rows: &[(usize, usize)],
    ci: usize,
    co0: usize,
    l0: usize,
    o0: usize,
    o1: usize,
) -> [[[f32; GL]; 2]; CB] {
    use std::arch::x86_64::*;
    let mut acc = [_mm512_setzero_ps(); 2 * CB];
    for &(sb, db) in rows {
        let s = src.add(ci * cs + sb + l0);
        let (sa, sb) = (_mm512_loadu_ps(s.add(o0)), _mm512_loadu_ps(s.add(o1)));
        let d0 = dy.add(db + l0 + co0 * dcs);
        for c in 0..CB {
            let d = _mm512_loadu_ps(d0.add(c * dcs));
            acc[2 * c] = _mm512_fmadd_ps(d, sa, acc[2 * c]);
            acc[2 * c + 1] = _mm512_fmadd_ps(d, sb, acc[2 * c + 1]);
        }
    }
    let mut out = [[[0.0f32; GL]; 2]; CB];
    for c in 0..CB {
        for t in 0..2 {
            _mm512_storeu_ps(out[c][t].as_mut_ptr(), acc[2 * c + t]);
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn grad_f32_avx2(
    src: *const f32,
    cs: usize,
    dy: *const f32,
    dcs: usize,
    rows: &[(usize, usize)],
    ci: usize,
    co0: usize,
    l0: usize,
    o0: usize,
    o1: usize,
) -> [[[f32; GL]; 2]; CB] {
    use std::arch::x86_64::*;
    let mut out = [[[0.0f32; GL]; 2]; CB];
    for h in [0, 8] {
        let mut acc = [_mm256_setzero_ps(); 2 * CB];
        for &(sb, db) in rows {
            let s = src.add(ci * cs + sb + l0 + h);
            let (sa, sb) = (_mm256_loadu_ps(s.add(o0)), _mm256_loadu_ps(s.add(o1)));
            let d0 = dy.add(db + l0 + h + co0 * dcs);
            for c in 0..CB {
                let d = _mm256_loadu_ps(d0.add(c * dcs));
                acc[2 * c] = _mm256_fmadd_ps(d, sa, acc[2 * c]);
                acc[2 * c + 1] = _mm256_fmadd_ps(d, sb, acc[2 * c + 1]);
            }
        }
        for c in 0..CB {
            for t in 0..2 {
                _mm256_storeu_ps(out[c][t][h..].as_mut_ptr(), acc[2 * c + t]);
            }
        }
    }
    out
}

/// Lanes kept per gradient entry until the final reduction.
const GL: usize = 16;

#[inline(always)]
fn grad_lane_width<T: Element, const C: usize, const TB: usize>(
    k: &GradRows<T>,
    rows: &[(usize, usize)],
    co0: usize,
    ci: usize,
    t0: usize,
    lanes: &mut [T],
) {
    let nt = k.offs.len();
    let mut l0 = 0;
    macro_rules! run {
        ($l:literal) => {
            while l0 + $l <= k.len {
                // SAFETY: row bounds were validated by `grad_rows`.
                let acc = unsafe {
                    if $l == GL && C == CB && TB == 2 && k.isa != Isa::Portable {
                        grad_block_f32::<T, C, TB, $l>(k, rows, co0, ci, t0, l0)
                    } else {
                        grad_block::<T, C, TB, $l>(k, rows, co0, ci, t0, l0)
                    }
                };
                for (c, per_t) in acc.iter().enumerate() {
                    for (tb, a) in per_t.iter().enumerate() {
                        let at = (((co0 + c) * k.csrc + ci) * nt + t0 + tb) * GL;
                        for (d, &v) in lanes[at..at + $l].iter_mut().zip(a) {
                            *d += v;
                        }
                    }
                }
                l0 += $l;
            }
        };
    }
    run!(16);
    run!(8);
    run!(1);
}

#[inline(always)]
fn grad_rows_impl<T: Element>(k: &GradRows<T>, rows: &[(usize, usize)], out: &mut [T]) {
    let nt = k.offs.len();
    let mut lanes = vec![T::zero(); k.cdy * k.csrc * nt * GL];
    for tile in rows.chunks(ROW_TILE) {
        let mut co0 = 0;
        while co0 < k.cdy {
            let wide = co0 + CB <= k.cdy;
            for ci in 0..k.csrc {
                let mut t0 = 0;
                while t0 < nt {
                    let tb = if t0 + 2 <= nt { 2 } else { 1 };
                    match (wide, tb) {
                        (true, 2) => grad_lane_width::<T, CB, 2>(k, tile, co0, ci, t0, &mut lanes),
                        (true, _) => grad_lane_width::<T, CB, 1>(k, tile, co0, ci, t0, &mut lanes),
                        (false, 2) => grad_lane_width::<T, 1, 2>(k, tile, co0, ci, t0, &mut lanes),
                        (false, _) => grad_lane_width::<T, 1, 1>(k, tile, co0, ci, t0, &mut lanes),
                    }
                    t0 += tb;
                }
            }
            co0 += if wide { CB } else { 1 };
        }
    }
    for (o, l) in out.iter_mut().zip(lanes.chunks_exact(GL)) {
        *o += l.iter().fold(T::zero(), |a, &v| a + v);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn grad_rows_avx512<T: Element>(k: &GradRows<T>, rows: &[(usize, usize)], out: &mut [T]) {
    grad_rows_impl(k, rows, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn grad_rows_avx2<T: Element>(k: &GradRows<T>, rows: &[(usize, usize)], out: &mut [T]) {
    grad_rows_impl(k, rows, out)
}

fn grad_rows<T: Element>(k: &GradRows<T>, rows: &[(usize, usize)], out: &mut [T]) {
    let max_off = k.offs.iter().copied().max().unwrap_or(0);
    for &(sb, db) in rows {
        assert!(k.csrc == 0 || (k.csrc - 1) * k.cs + sb + max_off + k.len <= k.src.len(), "gradient source out of range");
        assert!(k.cdy == 0 || (k.cdy - 1) * k.dcs + db + k.len <= k.dy.len(), "gradient rows out of range");
    }
    assert!(out.len() >= k.cdy * k.csrc * k.offs.len());
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::is_x86_feature_detected as has;
        if has!("avx512f") && has!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { grad_rows_avx512(k, rows, out) };
            return;
        }
        if has!("avx2") && has!("fma") {
            // SAFETY: as above.
            unsafe { grad_rows_avx2(k, rows, out) };
            return;
        }
    }
    grad_rows_impl(k, rows, out)
}

/// Weight gradient of a stride-1 convolution for one sample:
/// `dw[co][ci][t] += sum_p dy[co][p] * big[ci][p + t - pad]`.
pub(crate) fn conv_weight_grad<T: Element>(big: &[T], cin: usize, dy: &[T], cout: usize, g: &ConvGeom, dw: &mut [T]) {
    debug_assert!(conv_forward_ok(g));
    let (src, p) = padded(big, cin, g.big, [g.pad; 3], [g.pad; 3]);
    let k = g.k;
    let offs: Vec<usize> = (0..k * k * k).map(|t| offset(p, t / (k * k), (t / k) % k, t % k)).collect();
    let [sd, sh, sw] = g.small;
    let rows: Vec<(usize, usize)> =
        (0..sd).flat_map(|z| (0..sh).map(move |y| (offset(p, z, y, 0), (z * sh + y) * sw))).collect();
    let kern = GradRows { src: &src, cs: p.iter().product(), csrc: cin, offs: &offs, dy, dcs: sd * sh * sw, cdy: cout, len: sw, isa: Isa::detect::<T>() };
    grad_rows(&kern, &rows, dw);
}

/// Weight gradient of a transposed convolution for one sample, `w` laid out
/// `(c_small, c_big, k^3)`: `dw[ci][co][t] += sum_i small[ci][i] * big[co][s*i - pad + t]`.
pub(crate) fn deconv_weight_grad<T: Element>(big: &[T], cout: usize, small: &[T], cin: usize, g: &ConvGeom, dw: &mut [T]) {
    debug_assert!(phases_ok(g));
    let plan = phase_plan(g);
    let (src, p) = padded(small, cin, g.small, plan.lo, plan.hi);
    let s = g.stride;
    let [_, bh, bw] = g.big;
    let [sd, sh, sw] = g.small;
    let (bvol, svol) = (g.big_volume(), g.small_volume());
    let taps3 = g.taps();
    let mut grid = vec![T::zero(); cout * svol];
    let rows: Vec<(usize, usize)> =
        (0..sd).flat_map(|z| (0..sh).map(move |y| (offset(p, z, y, 0), (z * sh + y) * sw))).collect();
    for rz in 0..s {
        for ry in 0..s {
            for rx in 0..s {
                let (taps, offs) = phase_offsets(&plan, g.k, p, [rz, ry, rx], plan.lo, 1);
                if taps.is_empty() {
                    continue;
                }
                for co in 0..cout {
                    for qz in 0..sd {
                        for qy in 0..sh {
                            let from = co * bvol + ((s * qz + rz) * bh + s * qy + ry) * bw + rx;
                            let to = co * svol + (qz * sh + qy) * sw;
                            for (qx, d) in grid[to..to + sw].iter_mut().enumerate() {
                                *d = big[from + s * qx];
                            }
                        }
                    }
                }
                let nt = taps.len();
                let mut part = vec![T::zero(); cout * cin * nt];
                let kern = GradRows { src: &src, cs: p.iter().product(), csrc: cin, offs: &offs, dy: &grid, dcs: svol, cdy: cout, len: sw, isa: Isa::detect::<T>() };
                grad_rows(&kern, &rows, &mut part);
                for co in 0..cout {
                    for ci in 0..cin {
                        for (j, &t) in taps.iter().enumerate() {
                            dw[(ci * cout + co) * taps3 + t] += part[(co * cin + ci) * nt + j];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::conv::weight_grad;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn close(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_weight_grad_matches_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let k = [1, 2, 3][rng.gen_range(0..3)];
            let pad = rng.gen_range(0..k);
            let dims = [rng.gen_range(k..7), rng.gen_range(k..7), rng.gen_range(k..40)];
            let g = ConvGeom::for_conv(dims, k, 1, pad).unwrap();
            let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..7));
            let x = rand_vec(&mut rng, cin * g.big_volume());
            let dy = rand_vec(&mut rng, cout * g.small_volume());
            let mut a = vec![0.0; cout * cin * g.taps()];
            let mut b = a.clone();
            conv_weight_grad(&x, cin, &dy, cout, &g, &mut a);
            weight_grad(&x, cin, &dy, cout, &g, &mut b);
            assert!(close(&a, &b) < 1e-10, "{g:?}");
        }
    }

    #[test]
    fn deconv_weight_grad_matches_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tested = 0;
        while tested < 30 {
            let s = rng.gen_range(1..4);
            let k = rng.gen_range(s..2 * s + 2);
            let pad = rng.gen_range(0..k);
            let dims = [rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..24)];
            let Ok(g) = ConvGeom::for_deconv(dims, k, s, pad) else { continue };
            if !phases_ok(&g) {
                continue;
            }
            tested += 1;
            let (cin, cout) = (rng.gen_range(1..7), rng.gen_range(1..4));
            let x = rand_vec(&mut rng, cin * g.small_volume());
            let dy = rand_vec(&mut rng, cout * g.big_volume());
            let mut a = vec![0.0; cin * cout * g.taps()];
            let mut b = a.clone();
            deconv_weight_grad(&dy, cout, &x, cin, &g, &mut a);
            weight_grad(&dy, cout, &x, cin, &g, &mut b);
            assert!(close(&a, &b) < 1e-10, "{g:?}");
        }
    }
}
