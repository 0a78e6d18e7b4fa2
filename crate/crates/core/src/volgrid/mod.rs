//! Dense volumetric containers, region-of-interest geometry, the Dice
//! similarity metric and the VGF volume file format.
//!
//! Voxels are stored with `x` (the coronal index) fastest, then `y`, then
//! `z`: `index = x + W * (y + H * z)`.

mod io;
mod roi;

pub use io::{decode_any, decode_volume, encode_volume, read_any, read_sidecar, read_volume, write_sidecar, write_volume, AnyVolume};
pub use roi::{bounding_box, pad_roi, Roi};

use crate::error::{shape_err, Error, Result};
use serde::{Deserialize, Serialize};

/// Voxel counts along (coronal, sagittal, axial) = (W, H, L).
pub type Dims = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Score,
    Mask,
}

impl VolumeKind {
    pub fn code(self) -> u8 {
        match self {
            VolumeKind::Image => 0,
            VolumeKind::Score => 1,
            VolumeKind::Mask => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(VolumeKind::Image),
            1 => Some(VolumeKind::Score),
            2 => Some(VolumeKind::Mask),
            _ => None,
        }
    }
}

/// Element types that can live in a [`Volume`].
pub trait Voxel: Copy + PartialEq + Default + Send + Sync + std::fmt::Debug + 'static {
    /// VGF dtype code.
    const DTYPE: u8;
    const SIZE: usize;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
    fn kind_allowed(kind: VolumeKind) -> bool;
    fn from_any(any: AnyVolume) -> Option<Volume<Self>>;
}

impl Voxel for f32 {
    const DTYPE: u8 = 0;
    const SIZE: usize = 4;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn kind_allowed(kind: VolumeKind) -> bool {
        kind != VolumeKind::Mask
    }
    fn from_any(any: AnyVolume) -> Option<Volume<Self>> {
        match any {
            AnyVolume::F32(v) => Some(v),
            AnyVolume::U8(_) => None,
        }
    }
}

impl Voxel for u8 {
    const DTYPE: u8 = 1;
    const SIZE: usize = 1;
    fn put_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
    fn kind_allowed(kind: VolumeKind) -> bool {
        kind == VolumeKind::Mask
    }
    fn from_any(any: AnyVolume) -> Option<Volume<Self>> {
        match any {
            AnyVolume::U8(v) => Some(v),
            AnyVolume::F32(_) => None,
        }
    }
}

/// A dense `W x H x L` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = f32> {
    dims: Dims,
    kind: VolumeKind,
    data: Vec<T>,
}

/// Binary per-voxel labels.
pub type LabelMask = Volume<u8>;

pub fn voxel_count(dims: Dims) -> Result<usize> {
    if dims.contains(&0) {
        return Err(shape_err!("volume dims must be positive, got {dims:?}"));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| shape_err!("volume dims {dims:?} overflow"))
}

impl<T: Voxel> Volume<T> {
    /// Wraps `data` without checking value ranges. Length and kind/type
    /// agreement are still enforced.
    pub fn from_raw(dims: Dims, kind: VolumeKind, data: Vec<T>) -> Result<Self> {
        let n = voxel_count(dims)?;
        if data.len() != n {
            return Err(shape_err!("dims {dims:?} need {n} voxels, got {}", data.len()));
        }
        if !T::kind_allowed(kind) {
            return Err(Error::Domain(format!("kind {kind:?} cannot be stored as dtype {}", T::DTYPE)));
        }
        Ok(Self { dims, kind, data })
    }

    pub fn filled(dims: Dims, kind: VolumeKind, value: T) -> Result<Self> {
        let n = voxel_count(dims)?;
        Self::from_raw(dims, kind, vec![value; n])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn same_dims<U: Voxel>(&self, other: &Volume<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("dimension mismatch: {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    pub fn whole_roi(&self) -> Roi {
        Roi::whole(self.dims)
    }

    /// Copies the voxels inside `roi`.
    pub fn crop(&self, roi: &Roi) -> Result<Self> {
        roi.check_inside(self.dims)?;
        let side = roi.side();
        let mut data = Vec::with_capacity(side.iter().product());
        for z in roi.lo[2]..=roi.hi[2] {
            for y in roi.lo[1]..=roi.hi[1] {
                let start = self.index(roi.lo[0], y, z);
                data.extend_from_slice(&self.data[start..start + side[0]]);
            }
        }
        Ok(Self { dims: side, kind: self.kind, data })
    }

    /// Overwrites the `roi` region with `src`.
    pub fn paste(&mut self, roi: &Roi, src: &Self) -> Result<()> {
        roi.check_inside(self.dims)?;
        let side = roi.side();
        if src.dims != side {
            return Err(shape_err!("paste source {:?} does not match roi side {side:?}", src.dims));
        }
        let mut k = 0;
        for z in roi.lo[2]..=roi.hi[2] {
            for y in roi.lo[1]..=roi.hi[1] {
                let start = self.index(roi.lo[0], y, z);
                self.data[start..start + side[0]].copy_from_slice(&src.data[k..k + side[0]]);
                k += side[0];
            }
        }
        Ok(())
    }

    pub fn map<U: Voxel>(&self, kind: VolumeKind, f: impl Fn(T) -> U) -> Result<Volume<U>> {
        Volume::from_raw(self.dims, kind, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl Volume<f32> {
    pub fn image(dims: Dims, data: Vec<f32>) -> Result<Self> {
        Self::from_raw(dims, VolumeKind::Image, data)
    }

    /// Strict score constructor: every value must lie in `[0, 1]`.
    pub fn score(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("score value {v} outside [0, 1]")));
        }
        Self::from_raw(dims, VolumeKind::Score, data)
    }

    /// Score constructor for externally produced maps: out-of-range values
    /// are clamped into `[0, 1]` and reported with a warning. NaN is rejected.
    pub fn score_clamped(dims: Dims, mut data: Vec<f32>) -> Result<Self> {
        let mut clamped = 0usize;
        for v in data.iter_mut() {
            if v.is_nan() {
                return Err(Error::Domain("score volume contains NaN".into()));
            }
            if !(0.0..=1.0).contains(v) {
                *v = v.clamp(0.0, 1.0);
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} score voxels into [0, 1]");
        }
        Self::from_raw(dims, VolumeKind::Score, data)
    }
}

impl LabelMask {
    pub fn mask(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Domain(format!("mask value {v} is not binary")));
        }
        Self::from_raw(dims, VolumeKind::Mask, data)
    }

    pub fn empty(dims: Dims) -> Result<Self> {
        Self::filled(dims, VolumeKind::Mask, 0)
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> bool) -> Result<Self> {
        let n = voxel_count(dims)?;
        let mut data = Vec::with_capacity(n);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z) as u8);
                }
            }
        }
        Self::from_raw(dims, VolumeKind::Mask, data)
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// What [`dsc_with`] returns when both masks are empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyDsc {
    /// Agreement on absence counts as a perfect match.
    #[default]
    One,
    Zero,
}

/// Dice-Sorensen coefficient `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dsc(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    dsc_with(a, b, EmptyDsc::One)
}

pub fn dsc_with(a: &LabelMask, b: &LabelMask, empty: EmptyDsc) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut total) = (0u64, 0u64);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        inter += (p & q) as u64;
        total += p as u64 + q as u64;
    }
    if total == 0 {
        return Ok(match empty {
            EmptyDsc::One => 1.0,
            EmptyDsc::Zero => 0.0,
        });
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_list(dims: Dims, on: &[[usize; 3]]) -> LabelMask {
        let mut m = LabelMask::empty(dims).unwrap();
        for p in on {
            m.set(p[0], p[1], p[2], 1);
        }
        m
    }

    #[test]
    fn dsc_identity_and_disjoint() {
        let a = mask_list([4, 4, 4], &[[0, 0, 0], [1, 2, 3]]);
        let b = mask_list([4, 4, 4], &[[3, 3, 3]]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dsc_counts_example() {
        // |A| = 4, |B| = 6, |A ∩ B| = 3
        let a = mask_list([5, 5, 5], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [4, 4, 4]]);
        let b = mask_list([5, 5, 5], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0], [0, 2, 0], [0, 3, 0]]);
        let mut inter = 0;
        let (mut na, mut nb) = (0, 0);
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let (p, q) = (a.get(x, y, z), b.get(x, y, z));
                    na += p as usize;
                    nb += q as usize;
                    inter += (p == 1 && q == 1) as usize;
                }
            }
        }
        assert_eq!((na, nb, inter), (4, 6, 3));
        assert!((dsc(&a, &b).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn dsc_empty_policy() {
        let e = LabelMask::empty([2, 2, 2]).unwrap();
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc_with(&e, &e, EmptyDsc::Zero).unwrap(), 0.0);
    }

    #[test]
    fn dsc_dimension_mismatch() {
        let a = LabelMask::empty([2, 2, 2]).unwrap();
        let b = LabelMask::empty([2, 2, 3]).unwrap();
        assert!(matches!(dsc(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn constructors_validate() {
        assert!(Volume::image([2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Volume::image([0, 2, 2], vec![]).is_err());
        assert!(Volume::score([1, 1, 2], vec![0.5, 1.5]).is_err());
        assert!(LabelMask::mask([1, 1, 2], vec![0, 2]).is_err());
        assert!(Volume::<u8>::from_raw([1, 1, 1], VolumeKind::Image, vec![0]).is_err());
        let s = Volume::score_clamped([1, 1, 3], vec![1.000_000_1, -0.1, 0.3]).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.3]);
        assert!(Volume::score_clamped([1, 1, 1], vec![f32::NAN]).is_err());
    }

    fn ramp(dims: Dims) -> Volume {
        let n = dims.iter().product::<usize>();
        Volume::image(dims, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn crop_whole_is_copy() {
        let v = ramp([4, 5, 6]);
        assert_eq!(v.crop(&v.whole_roi()).unwrap(), v);
    }

    #[test]
    fn crop_ramp_values_follow_index_formula() {
        let dims = [7, 6, 5];
        let v = ramp(dims);
        let roi = Roi::new([2, 1, 1], [4, 3, 3]).unwrap();
        let c = v.crop(&roi).unwrap();
        assert_eq!(c.dims(), [3, 3, 3]);
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let expect = (x + 2) + 7 * ((y + 1) + 6 * (z + 1));
                    assert_eq!(c.get(x, y, z), expect as f32);
                }
            }
        }
    }

    #[test]
    fn paste_round_trip_and_bounds() {
        let v = ramp([6, 6, 6]);
        let roi = Roi::new([1, 2, 0], [3, 5, 4]).unwrap();
        let c = v.crop(&roi).unwrap();
        let mut z = Volume::filled([6, 6, 6], VolumeKind::Image, 0.0).unwrap();
        z.paste(&roi, &c).unwrap();
        assert_eq!(z.crop(&roi).unwrap(), c);
        let outside: f32 = z.data().iter().sum::<f32>() - c.data().iter().sum::<f32>();
        assert_eq!(outside, 0.0);
        let bad = Roi::new([0, 0, 0], [6, 0, 0]).unwrap();
        assert!(v.crop(&bad).is_err());
        assert!(z.paste(&Roi::new([0, 0, 0], [1, 1, 1]).unwrap(), &c).is_err());
    }

    fn arb_mask_pair() -> impl Strategy<Value = (LabelMask, LabelMask)> {
        (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(w, h, l)| {
            let n = w * h * l;
            (
                proptest::collection::vec(0u8..2, n),
                proptest::collection::vec(0u8..2, n),
            )
                .prop_map(move |(a, b)| {
                    (LabelMask::mask([w, h, l], a).unwrap(), LabelMask::mask([w, h, l], b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn dsc_symmetric_and_matches_counts((a, b) in arb_mask_pair()) {
            let ab = dsc(&a, &b).unwrap();
            prop_assert_eq!(ab, dsc(&b, &a).unwrap());
            let na = a.data().iter().filter(|&&v| v == 1).count();
            let nb = b.data().iter().filter(|&&v| v == 1).count();
            let inter = a.data().iter().zip(b.data()).filter(|(&p, &q)| p == 1 && q == 1).count();
            let expect = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
            prop_assert_eq!(ab, expect);
            if na > 0 {
                prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
            }
        }
    }
}
