//! Training data: normalization, ROI patch sampling, cube-rotation
//! augmentation and the phantom corpus.

mod corpus;
mod orient;
mod phantom;

pub use corpus::{read_case, write_case, CaseMeta, CorpusEntry, CorpusManifest, Split, SCORE_FILES};
pub use orient::{orientation_group, Orientation};
pub use phantom::{gen_phantom, PhantomSpec, Slab, SlabMode};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::vfn::PatchSource;
use crate::volgrid::{bounding_box, pad_roi, Dims, LabelMask, Roi, Volume};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Side of every training and inference patch.
pub const PATCH: usize = 64;
/// Margin added around the ground-truth box when sampling training patches.
pub const TRAIN_ROI_PAD: usize = 32;

/// Order of the score views within a case and within the network input.
pub const VIEWS: [&str; 3] = ["coronal", "sagittal", "axial"];

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume<f32>,
    pub gt: LabelMask,
    /// Coronal, sagittal, axial.
    pub scores: [Volume<f32>; 3],
    /// Failure slabs per view, when the case is a phantom.
    pub slabs: Option<[Vec<Slab>; 3]>,
    normalized: bool,
}

impl Case {
    pub fn new(id: String, image: Volume<f32>, gt: LabelMask, scores: [Volume<f32>; 3]) -> Result<Self> {
        image.same_dims(&gt)?;
        for s in &scores {
            image.same_dims(s)?;
        }
        Ok(Self { id, image, gt, scores, slabs: None, normalized: false })
    }

    pub fn dims(&self) -> Dims {
        self.image.dims()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Intensity window mapped onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HuWindow {
    pub lo: f32,
    pub hi: f32,
}

impl Default for HuWindow {
    fn default() -> Self {
        Self { lo: -160.0, hi: 240.0 }
    }
}

impl HuWindow {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi && self.lo.is_finite() && self.hi.is_finite()) {
            return Err(Error::Config(format!("HU window [{}, {}] must have lo < hi", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn map(&self, hu: f32) -> f32 {
        ((hu.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    pub fn apply(&self, image: &Volume<f32>) -> Result<Volume<f32>> {
        self.validate()?;
        Volume::image(image.dims(), image.data().iter().map(|&v| self.map(v)).collect())
    }
}

/// Maps the image through `window` and clamps scores into `[0, 1]`.
/// A case that is already normalized is returned unchanged.
pub fn normalize(case: &Case, window: &HuWindow) -> Result<Case> {
    window.validate()?;
    if case.normalized {
        return Ok(case.clone());
    }
    let scores = case.scores.clone().map(|s| {
        let dims = s.dims();
        Volume::score_clamped(dims, s.into_data())
    });
    let [c, s, a] = scores;
    Ok(Case {
        id: case.id.clone(),
        image: window.apply(&case.image)?,
        gt: case.gt.clone(),
        scores: [c?, s?, a?],
        slabs: case.slabs.clone(),
        normalized: true,
    })
}

/// Ground-truth box padded by [`TRAIN_ROI_PAD`] and clamped to the volume.
pub fn training_roi(case: &Case) -> Result<Roi> {
    Ok(pad_roi(&bounding_box(&case.gt)?, TRAIN_ROI_PAD, case.dims()))
}

/// Which channels feed the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub image: bool,
}

impl Channels {
    pub const ALL: Channels = Channels { image: true };
    pub const SCORES_ONLY: Channels = Channels { image: false };

    pub fn count(&self) -> usize {
        3 + usize::from(self.image)
    }

    pub fn for_count(n: usize) -> Result<Self> {
        match n {
            4 => Ok(Self::ALL),
            3 => Ok(Self::SCORES_ONLY),
            _ => Err(shape_err!("fusion input has 3 or 4 channels, not {n}")),
        }
    }

    /// Volumes in network order: image (if used), coronal, sagittal, axial.
    pub fn select<'a>(&self, image: &'a Volume<f32>, scores: &'a [Volume<f32>; 3]) -> Vec<&'a Volume<f32>> {
        let mut v = Vec::with_capacity(4);
        if self.image {
            v.push(image);
        }
        v.extend(scores.iter());
        v
    }
}

/// Copies the `side^3` window at signed `origin` into `out`, laid out
/// `(z, y, x)`; voxels outside the volume read as zero.
pub fn crop_into<T: crate::volgrid::Voxel + Into<f32>>(v: &Volume<T>, origin: [i64; 3], side: usize, out: &mut [f32]) {
    let dims = v.dims();
    assert_eq!(out.len(), side * side * side);
    out.iter_mut().for_each(|o| *o = 0.0);
    let data = v.data();
    let inside = |a: usize, o: i64| -> std::ops::Range<usize> {
        let lo = (-o).clamp(0, side as i64) as usize;
        let hi = (dims[a] as i64 - o).clamp(0, side as i64) as usize;
        lo..hi.max(lo)
    };
    let (rx, ry, rz) = (inside(0, origin[0]), inside(1, origin[1]), inside(2, origin[2]));
    for z in rz {
        let sz = (origin[2] + z as i64) as usize;
        for y in ry.clone() {
            let sy = (origin[1] + y as i64) as usize;
            let src = dims[0] * (sy + dims[1] * sz);
            let dst = side * (y + side * z);
            for x in rx.clone() {
                out[dst + x] = data[src + (origin[0] + x as i64) as usize].into();
            }
        }
    }
}

/// Uniform window origin for patch sampling. Along an axis where the ROI is
/// at least `side` long the window stays inside the ROI; otherwise it covers
/// the whole ROI and, where possible, stays inside the volume.
pub fn sample_origin(roi: &Roi, dims: Dims, side: usize, rng: &mut ChaCha8Rng) -> [i64; 3] {
    [0, 1, 2].map(|a| {
        let (lo, hi) = (roi.lo[a] as i64, roi.hi[a] as i64);
        let s = side as i64;
        let (mut from, mut to) = if hi - lo + 1 >= s { (lo, hi + 1 - s) } else { (hi + 1 - s, lo) };
        if dims[a] as i64 >= s && hi - lo + 1 < s {
            from = from.max(0);
            to = to.min(dims[a] as i64 - s);
        }
        if from >= to {
            from
        } else {
            rng.gen_range(from..=to)
        }
    })
}

/// One training example: `x` is `(C, S, S, S)`, `y` is `(1, S, S, S)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub origin: [i64; 3],
}

impl Sample {
    pub fn orient(&self, g: &Orientation) -> Result<Sample> {
        Ok(Sample { x: g.apply(&self.x)?, y: g.apply(&self.y)?, origin: self.origin })
    }
}

/// Crops the channels and label of a normalized case at `origin`.
pub fn extract(case: &Case, channels: Channels, origin: [i64; 3], side: usize) -> Result<Sample> {
    if !case.normalized {
        return Err(Error::Config(format!("case `{}` must be normalized before sampling", case.id)));
    }
    let vol = side * side * side;
    let vols = channels.select(&case.image, &case.scores);
    let mut x = vec![0.0; vols.len() * vol];
    for (v, chunk) in vols.iter().zip(x.chunks_exact_mut(vol)) {
        crop_into(v, origin, side, chunk);
    }
    let mut y = vec![0.0; vol];
    crop_into(&case.gt, origin, side, &mut y);
    Ok(Sample {
        x: Tensor::from_vec(&[vols.len(), side, side, side], x)?,
        y: Tensor::from_vec(&[1, side, side, side], y)?,
        origin,
    })
}

/// A uniformly placed `PATCH^3` sample from `roi`.
pub fn sample_patch(case: &Case, roi: &Roi, channels: Channels, rng: &mut ChaCha8Rng) -> Result<Sample> {
    roi.check_inside(case.dims())?;
    let origin = sample_origin(roi, case.dims(), PATCH, rng);
    extract(case, channels, origin, PATCH)
}

/// Normalized training cases with their sampling ROIs.
pub struct TrainingSet {
    cases: Vec<(Case, Roi)>,
    channels: Channels,
    augment: bool,
    group: [Orientation; 24],
}

impl TrainingSet {
    pub fn new(cases: Vec<Case>, window: &HuWindow, channels: Channels, augment: bool) -> Result<Self> {
        let cases = cases
            .into_iter()
            .map(|c| {
                let roi = training_roi(&c).map_err(|e| Error::Config(format!("training case `{}`: {e}", c.id)))?;
                Ok((normalize(&c, window)?, roi))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cases, channels, augment, group: orientation_group() })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

impl PatchSource for TrainingSet {
    fn channels(&self) -> usize {
        self.channels.count()
    }

    fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (case, roi) = &self.cases[rng.gen_range(0..self.cases.len())];
        let mut s = sample_patch(case, roi, self.channels, rng)?;
        if self.augment {
            s = s.orient(&self.group[rng.gen_range(0..24)])?;
        }
        Ok((s.x, s.y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::dsc;
    use rand::SeedableRng;

    fn tiny_case(dims: Dims) -> Case {
        let n = dims.iter().product();
        let image = Volume::image(dims, (0..n).map(|i| (i % 500) as f32 - 250.0).collect()).unwrap();
        let gt = LabelMask::from_fn(dims, |x, y, z| x == dims[0] / 2 && y == dims[1] / 2 && z == dims[2] / 2).unwrap();
        let s = Volume::score(dims, (0..n).map(|i| (i % 7) as f32 / 6.0).collect()).unwrap();
        Case::new("t".into(), image, gt, [s.clone(), s.clone(), s]).unwrap()
    }

    #[test]
    fn window_examples() {
        let w = HuWindow::default();
        assert_eq!(w.map(-160.0), 0.0);
        assert_eq!(w.map(240.0), 1.0);
        assert_eq!(w.map(40.0), 0.5);
        assert_eq!(w.map(-1000.0), 0.0);
        assert!(HuWindow { lo: 1.0, hi: 1.0 }.validate().is_err());
    }

    #[test]
    fn normalize_is_idempotent() {
        let c = tiny_case([8, 8, 8]);
        let w = HuWindow::default();
        let n1 = normalize(&c, &w).unwrap();
        let n2 = normalize(&n1, &w).unwrap();
        assert_eq!(n1, n2);
        assert!(n1.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(!c.is_normalized() && n1.is_normalized());
    }

    #[test]
    fn training_roi_pads_and_clamps() {
        let mut c = tiny_case([512, 8, 8]);
        c.gt = LabelMask::from_fn([512, 8, 8], |x, _, _| (40..=50).contains(&x)).unwrap();
        let r = training_roi(&c).unwrap();
        assert_eq!((r.lo, r.hi), ([8, 0, 0], [82, 7, 7]));
        c.gt = LabelMask::empty([512, 8, 8]).unwrap();
        assert!(training_roi(&c).is_err());
    }

    #[test]
    fn exact_roi_has_one_window() {
        let roi = Roi::new([3, 4, 5], [66, 67, 68]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(sample_origin(&roi, [80; 3], 64, &mut rng), [3, 4, 5]);
        }
    }

    #[test]
    fn small_roi_window_covers_it() {
        let roi = Roi::new([10, 10, 10], [19, 19, 19]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let o = sample_origin(&roi, [100; 3], 64, &mut rng);
            assert!(o.iter().all(|&v| (0..=10).contains(&v)));
        }
        // Volume smaller than the patch: origins may go negative.
        let o = sample_origin(&Roi::whole([20, 20, 20]), [20; 3], 64, &mut rng);
        assert!(o.iter().all(|&v| (-44..=0).contains(&v)));
    }

    #[test]
    fn label_patch_is_gt_crop() {
        let c = normalize(&tiny_case([70, 66, 65]), &HuWindow::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_patch(&c, &Roi::whole(c.dims()), Channels::ALL, &mut rng).unwrap();
        assert_eq!(s.x.shape(), &[4, 64, 64, 64]);
        let o = s.origin.map(|v| v as usize);
        for (z, y, x) in [(0, 0, 0), (63, 10, 5), (20, 63, 63)] {
            let i = (z * 64 + y) * 64 + x;
            assert_eq!(s.y.data()[i], f32::from(c.gt.get(o[0] + x, o[1] + y, o[2] + z)));
            assert_eq!(s.x.data()[i], c.image.get(o[0] + x, o[1] + y, o[2] + z));
            assert_eq!(s.x.data()[3 * 64 * 64 * 64 + i], c.scores[2].get(o[0] + x, o[1] + y, o[2] + z));
        }
        let s3 = extract(&c, Channels::SCORES_ONLY, s.origin, 64).unwrap();
        assert_eq!(s3.x.data(), &s.x.data()[64 * 64 * 64..]);
        assert!(extract(&tiny_case([8, 8, 8]), Channels::ALL, [0; 3], 4).is_err());
    }

    #[test]
    fn zero_padding_outside_volume() {
        let v = Volume::image([2, 2, 2], vec![1.0; 8]).unwrap();
        let mut out = vec![9.0; 27];
        crop_into(&v, [-1, -1, -1], 3, &mut out);
        assert_eq!(out.iter().sum::<f32>(), 8.0);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[26], 1.0);
    }

    #[test]
    fn orient_preserves_dsc() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = |rng: &mut ChaCha8Rng| (0..216).map(|_| if rng.gen_bool(0.4) { 1.0f32 } else { 0.0 }).collect::<Vec<_>>();
        let (a, b) = (m(&mut rng), m(&mut rng));
        let to_mask = |d: &[f32]| LabelMask::mask([6; 3], d.iter().map(|&v| v as u8).collect()).unwrap();
        let base = dsc(&to_mask(&a), &to_mask(&b)).unwrap();
        let (ta, tb) = (Tensor::from_vec(&[1, 6, 6, 6], a).unwrap(), Tensor::from_vec(&[1, 6, 6, 6], b).unwrap());
        for g in orientation_group() {
            let (ra, rb) = (g.apply(&ta).unwrap(), g.apply(&tb).unwrap());
            assert_eq!(dsc(&to_mask(ra.data()), &to_mask(rb.data())).unwrap(), base);
        }
    }
}
