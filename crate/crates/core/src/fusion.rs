//! Fusing three per-view segmentations: majority voting and sliding-window
//! network fusion over a test ROI.

use crate::datapipe::{crop_into, Channels, HuWindow, PATCH};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::vfn::VfnModel;
use crate::volgrid::{bounding_box, Dims, LabelMask, Roi, Volume};
use serde::Serialize;

/// Window stride of test-time inference.
pub const STRIDE: usize = 32;

/// An image and its three view score volumes, all of one shape.
#[derive(Clone, Debug)]
pub struct FusionInput {
    pub image: Volume<f32>,
    /// Coronal, sagittal, axial.
    pub scores: [Volume<f32>; 3],
}

impl FusionInput {
    pub fn new(image: Volume<f32>, scores: [Volume<f32>; 3]) -> Result<Self> {
        for s in &scores {
            image.same_dims(s)?;
        }
        Ok(Self { image, scores })
    }

    pub fn dims(&self) -> Dims {
        self.image.dims()
    }
}

pub fn majority_vote(a: &LabelMask, b: &LabelMask, c: &LabelMask) -> Result<LabelMask> {
    a.same_dims(b)?;
    a.same_dims(c)?;
    let data = a.data().iter().zip(b.data()).zip(c.data()).map(|((&x, &y), &z)| u8::from(x + y + z >= 2)).collect();
    LabelMask::mask(a.dims(), data)
}

/// `s >= t`, inclusive.
pub fn binarize(s: &Volume<f32>, t: f32) -> Result<LabelMask> {
    if !t.is_finite() {
        return Err(Error::Config(format!("threshold {t} is not finite")));
    }
    s.map(crate::volgrid::VolumeKind::Mask, |v| u8::from(v >= t))
}

/// Dims after zero-padding every axis up to one window.
pub fn padded_dims(dims: Dims) -> Dims {
    dims.map(|d| d.max(PATCH))
}

/// Grows `roi` symmetrically (then shifts it) until every side is at least
/// one window, inside a volume of `dims`, which must be at least one window.
pub fn fit_roi(roi: &Roi, dims: Dims) -> Result<Roi> {
    let mut r = *roi;
    for a in 0..3 {
        if dims[a] < PATCH || r.hi[a] >= dims[a] {
            return Err(shape_err!("roi {:?}..={:?} cannot hold a {PATCH}-window in dims {dims:?}", roi.lo, roi.hi));
        }
        let side = r.hi[a] - r.lo[a] + 1;
        if side < PATCH {
            let grow = PATCH - side;
            let lo = r.lo[a].saturating_sub(grow / 2).min(dims[a] - PATCH);
            r.lo[a] = lo;
            r.hi[a] = lo + PATCH - 1;
        }
    }
    Ok(r)
}

/// Where test-time fusion runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestRoi {
    /// Box of the majority-voted binarized views; `None` when MV is empty.
    pub mv_box: Option<Roi>,
    /// The box after growing to fit a window, in padded coordinates.
    pub roi: Roi,
    pub padded_dims: Dims,
    pub whole_volume_fallback: bool,
}

pub fn test_roi(input: &FusionInput) -> Result<TestRoi> {
    let [c, s, a] = input.scores.each_ref().map(|v| binarize(v, 0.5));
    let mv = majority_vote(&c?, &s?, &a?)?;
    let padded = padded_dims(input.dims());
    match bounding_box(&mv) {
        Ok(b) => Ok(TestRoi { mv_box: Some(b), roi: fit_roi(&b, padded)?, padded_dims: padded, whole_volume_fallback: false }),
        Err(Error::EmptyForeground) => {
            log::warn!("majority vote is empty; fusing over the whole volume");
            Ok(TestRoi { mv_box: None, roi: Roi::whole(padded), padded_dims: padded, whole_volume_fallback: true })
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowPlan {
    pub roi: Roi,
    pub window: usize,
    pub stride: usize,
    /// Window origins per axis.
    pub axis_offsets: [Vec<usize>; 3],
}

impl WindowPlan {
    pub fn offsets(&self) -> Vec<[usize; 3]> {
        let [xs, ys, zs] = &self.axis_offsets;
        let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &z in zs {
            for &y in ys {
                for &x in xs {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.axis_offsets.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn axis_offsets(lo: usize, hi: usize) -> Vec<usize> {
    let end = hi + 1;
    let mut out = Vec::new();
    let mut o = lo;
    loop {
        if o + PATCH >= end {
            out.push(end - PATCH);
            return out;
        }
        out.push(o);
        o += STRIDE;
    }
}

/// Windows every `STRIDE` voxels from `roi.lo`, the last one per axis
/// clamped to end at `roi.hi`. `dims` is zero-padded to one window first,
/// and the ROI grown to fit one.
pub fn plan_windows(roi: &Roi, dims: Dims) -> Result<WindowPlan> {
    let roi = fit_roi(roi, padded_dims(dims))?;
    let axis_offsets = [0, 1, 2].map(|a| axis_offsets(roi.lo[a], roi.hi[a]));
    Ok(WindowPlan { roi, window: PATCH, stride: STRIDE, axis_offsets })
}

/// Anything that maps a `(1, C, S, S, S)` patch to `(1, 1, S, S, S)` scores.
pub trait PatchPredictor {
    fn in_channels(&self) -> usize;
    fn predict_patch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchPredictor for VfnModel<f32> {
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn predict_patch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(x)
    }
}

/// Returns one input channel unchanged. Used to check the fusion plumbing.
#[derive(Clone, Copy, Debug)]
pub struct ChannelProbe {
    pub channels: usize,
    pub pick: usize,
}

impl PatchPredictor for ChannelProbe {
    fn in_channels(&self) -> usize {
        self.channels
    }

    fn predict_patch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [n, c, d, h, w] = x.dims5()?;
        if c != self.channels || self.pick >= c {
            return Err(shape_err!("probe expects {} channels with pick {}, got {c}", self.channels, self.pick));
        }
        let vol = d * h * w;
        let mut out = Vec::with_capacity(n * vol);
        for s in 0..n {
            let at = (s * c + self.pick) * vol;
            out.extend_from_slice(&x.data()[at..at + vol]);
        }
        Tensor::from_vec(&[n, 1, d, h, w], out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FusionReport {
    pub test_roi: TestRoi,
    pub windows: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub score: Volume<f32>,
    pub mask: LabelMask,
    pub report: FusionReport,
}

/// Sliding-window fusion with `model` over the test ROI. Overlapping window
/// scores are averaged; voxels outside the ROI score 0.
pub fn vfn_fuse(input: &FusionInput, model: &dyn PatchPredictor, window: &HuWindow) -> Result<FusionOutput> {
    let channels = Channels::for_count(model.in_channels())?;
    let image = window.apply(&input.image)?;
    let scores = input.scores.each_ref().map(|s| s.map(crate::volgrid::VolumeKind::Score, |v| v.clamp(0.0, 1.0)));
    let [c, s, a] = scores;
    let scores = [c?, s?, a?];
    let vols = channels.select(&image, &scores);

    let troi = test_roi(input)?;
    let plan = plan_windows(&troi.roi, input.dims())?;
    let dims = input.dims();
    let pd = troi.padded_dims;
    let mut acc = vec![0.0f64; pd.iter().product()];
    let mut count = vec![0u32; acc.len()];
    let vol = PATCH * PATCH * PATCH;
    let mut x = vec![0.0f32; vols.len() * vol];
    for o in plan.offsets() {
        let origin = o.map(|v| v as i64);
        for (v, chunk) in vols.iter().zip(x.chunks_exact_mut(vol)) {
            crop_into(v, origin, PATCH, chunk);
        }
        let t = Tensor::from_vec(&[1, vols.len(), PATCH, PATCH, PATCH], x.clone())?;
        let p = model.predict_patch(&t)?;
        if p.shape() != [1, 1, PATCH, PATCH, PATCH] {
            return Err(shape_err!("predictor returned shape {:?}", p.shape()));
        }
        let pdata = p.data();
        for z in 0..PATCH {
            for y in 0..PATCH {
                let row = o[0] + pd[0] * (o[1] + y + pd[1] * (o[2] + z));
                let src = &pdata[PATCH * (y + PATCH * z)..][..PATCH];
                for (k, &v) in src.iter().enumerate() {
                    acc[row + k] += f64::from(v);
                    count[row + k] += 1;
                }
            }
        }
    }

    let roi = plan.roi;
    let mut score = vec![0.0f32; dims.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if !roi.contains([x, y, z]) {
                    continue;
                }
                let i = x + pd[0] * (y + pd[1] * z);
                debug_assert!(count[i] > 0);
                score[x + dims[0] * (y + dims[1] * z)] = ((acc[i] / f64::from(count[i])) as f32).clamp(0.0, 1.0);
            }
        }
    }
    let score = Volume::score(dims, score)?;
    let mask = binarize(&score, 0.5)?;
    Ok(FusionOutput { score, mask, report: FusionReport { test_roi: troi, windows: plan.len(), channels: channels.count() } })
}

/// Per-voxel number of windows of `plan` covering each voxel of `dims`.
pub fn coverage(plan: &WindowPlan, dims: Dims) -> Vec<u32> {
    let mut c = vec![0u32; dims.iter().product()];
    for o in plan.offsets() {
        for z in o[2]..(o[2] + plan.window).min(dims[2]) {
            for y in o[1]..(o[1] + plan.window).min(dims[1]) {
                let row = dims[0] * (y + dims[1] * z);
                for x in o[0]..(o[0] + plan.window).min(dims[0]) {
                    c[row + x] += 1;
                }
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_examples() {
        let m = |v: u8| LabelMask::mask([1, 1, 1], vec![v]).unwrap();
        assert_eq!(majority_vote(&m(1), &m(1), &m(0)).unwrap(), m(1));
        assert_eq!(majority_vote(&m(0), &m(0), &m(1)).unwrap(), m(0));
        assert!(majority_vote(&m(1), &m(1), &LabelMask::empty([2, 1, 1]).unwrap()).is_err());
    }

    #[test]
    fn binarize_rule() {
        let s = Volume::score([3, 1, 1], vec![0.5, 0.4999, 1.0]).unwrap();
        assert_eq!(binarize(&s, 0.5).unwrap().data(), &[1, 0, 1]);
        let z = Volume::score([2, 2, 2], vec![0.0; 8]).unwrap();
        assert_eq!(binarize(&z, 0.5).unwrap().foreground_count(), 0);
    }

    #[test]
    fn window_offsets() {
        assert_eq!(axis_offsets(0, 63), vec![0]);
        assert_eq!(axis_offsets(0, 95), vec![0, 32]);
        assert_eq!(axis_offsets(0, 99), vec![0, 32, 36]);
        assert_eq!(axis_offsets(10, 109), vec![10, 42, 46]);
    }

    #[test]
    fn roi_fitting() {
        let one = Roi::new([50, 50, 50], [50, 50, 50]).unwrap();
        let r = fit_roi(&one, [96; 3]).unwrap();
        assert_eq!(r.side(), [64; 3]);
        assert!(r.contains([50, 50, 50]));
        let edge = Roi::new([95, 0, 40], [95, 2, 40]).unwrap();
        let r = fit_roi(&edge, [96; 3]).unwrap();
        assert_eq!((r.lo, r.hi), ([32, 0, 9], [95, 63, 72]));
        let big = Roi::new([10, 10, 10], [90, 90, 90]).unwrap();
        assert_eq!(fit_roi(&big, [96; 3]).unwrap(), big);
        assert!(fit_roi(&one, [40, 96, 96]).is_err());
    }
}
