//! Synthetic cases: a blob-shaped organ, a CT-like image and three per-view
//! score volumes degraded the way slice-wise 2D segmenters fail.

use super::Case;
use crate::error::{Error, Result};
use crate::volgrid::{bounding_box, Dims, LabelMask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Range of ellipsoid semi-axes, voxels.
    pub organ_radius: [f64; 2],
    /// Range of the number of ellipsoids in the organ.
    pub ellipsoids: [usize; 2],
    /// Range of the number of organ-like blobs placed away from the organ.
    pub distractors: [usize; 2],
    /// Per view (coronal, sagittal, axial): fraction of the organ's slices
    /// along the view's slicing axis that fall into failure slabs.
    pub corruption: [f64; 3],
    /// Std of the per-slice boundary offset in voxels, applied to every
    /// view with positive corruption.
    pub jitter: f64,
    /// Width of the soft score transition, voxels.
    pub softness: f64,
    pub background_hu: f64,
    pub organ_hu: f64,
    pub noise_hu: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [96; 3],
            organ_radius: [10.0, 20.0],
            ellipsoids: [2, 4],
            distractors: [1, 3],
            corruption: [0.2; 3],
            jitter: 1.0,
            softness: 1.0,
            background_hu: -20.0,
            organ_hu: 60.0,
            noise_hu: 25.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom spec: {m}")));
        let [rlo, rhi] = self.organ_radius;
        if !(rlo >= 2.0 && rlo <= rhi && rhi.is_finite()) {
            return bad("organ_radius must satisfy 2 <= min <= max");
        }
        if self.ellipsoids[0] < 1 || self.ellipsoids[0] > self.ellipsoids[1] || self.distractors[0] > self.distractors[1] {
            return bad("count ranges must be non-empty, with at least one ellipsoid");
        }
        if self.dims.iter().any(|&d| (d as f64) < 2.0 * rlo + 2.0) {
            return bad("dims too small for the organ size range");
        }
        if self.corruption.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("corruption rates must lie in [0, 1]");
        }
        if !(self.jitter >= 0.0 && self.softness > 0.0 && self.noise_hu >= 0.0) {
            return bad("jitter and noise must be non-negative, softness positive");
        }
        Ok(())
    }
}

struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
    /// Rows are the ellipsoid's axes.
    rot: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn random(rng: &mut ChaCha8Rng, c: [f64; 3], radius: [f64; 2]) -> Self {
        let r = [0; 3].map(|_| rng.gen_range(radius[0]..=radius[1]));
        // Random rotation from a unit quaternion.
        let q: [f64; 4] = {
            let v: [f64; 4] = [0; 4].map(|_| Normal::new(0.0, 1.0).unwrap().sample(rng));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.map(|x| x / n)
        };
        let [w, x, y, z] = q;
        let rot = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Self { c, r, rot }
    }

    /// Approximate signed distance in voxels, positive inside.
    fn level(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.c[0], p[1] - self.c[1], p[2] - self.c[2]];
        let mut rho2 = 0.0;
        for a in 0..3 {
            let u = self.rot[a][0] * d[0] + self.rot[a][1] * d[1] + self.rot[a][2] * d[2];
            rho2 += (u / self.r[a]).powi(2);
        }
        let rmin = self.r.iter().copied().fold(f64::INFINITY, f64::min);
        (1.0 - rho2.sqrt()) * rmin
    }
}

fn union_level(parts: &[Ellipsoid], p: [f64; 3]) -> f64 {
    parts.iter().map(|e| e.level(p)).fold(f64::NEG_INFINITY, f64::max)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn for_each_voxel(dims: Dims, mut f: impl FnMut([usize; 3])) {
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                f([x, y, z]);
            }
        }
    }
}

fn p64(p: [usize; 3]) -> [f64; 3] {
    p.map(|v| v as f64)
}

/// Smooth random field: a few plane waves with unit total amplitude.
struct Waves(Vec<([f64; 3], f64, f64)>);

impl Waves {
    fn random(rng: &mut ChaCha8Rng, n: usize, wavelength: [f64; 2], plane_axis: Option<usize>) -> Self {
        let amp = 1.0 / n as f64;
        Waves(
            (0..n)
                .map(|_| {
                    let mut dir: [f64; 3] = UnitSphere.sample(rng);
                    if let Some(a) = plane_axis {
                        dir[a] = 0.0;
                        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                        dir = dir.map(|x| x / n);
                    }
                    let k = std::f64::consts::TAU / rng.gen_range(wavelength[0]..=wavelength[1]);
                    (dir.map(|x| x * k), rng.gen_range(0.0..std::f64::consts::TAU), amp)
                })
                .collect(),
        )
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.0.iter().map(|(k, ph, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlabMode {
    Eroded,
    Zeroed,
}

/// A run of consecutive slices along a view's axis where that view fails.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slab {
    pub start: usize,
    pub len: usize,
    pub mode: SlabMode,
    /// Boundary retreat in voxels for eroded slabs.
    pub depth: f64,
}

fn plan_slabs(rng: &mut ChaCha8Rng, rate: f64, extent: (usize, usize)) -> Vec<Slab> {
    let span = extent.1 - extent.0 + 1;
    let total = (rate * span as f64).round() as usize;
    if total == 0 {
        return Vec::new();
    }
    let parts = if total >= 8 && rng.gen_bool(0.5) { 2 } else { 1 };
    let first = if parts == 2 { rng.gen_range(total / 3..=total - total / 3) } else { total };
    [first, total - first]
        .into_iter()
        .take(parts)
        .map(|len| {
            let start = extent.0 + rng.gen_range(0..=span - len);
            let mode = if rng.gen_bool(0.5) { SlabMode::Eroded } else { SlabMode::Zeroed };
            Slab { start, len, mode, depth: rng.gen_range(3.0..8.0) }
        })
        .collect()
}

/// Generates one case. The result depends only on `(spec, seed)`.
pub fn gen_phantom(spec: &PhantomSpec, seed: u64) -> Result<Case> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.dims;
    let center = [0, 1, 2].map(|a| dims[a] as f64 / 2.0 + rng.gen_range(-0.1..0.1) * dims[a] as f64);
    let n_ell = rng.gen_range(spec.ellipsoids[0]..=spec.ellipsoids[1]);
    let mut organ = vec![Ellipsoid::random(&mut rng, center, spec.organ_radius)];
    for _ in 1..n_ell {
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let reach = rng.gen_range(0.3..0.8) * organ[0].r.iter().copied().fold(0.0, f64::max);
        let c = [0, 1, 2].map(|a| center[a] + dir[a] * reach);
        organ.push(Ellipsoid::random(&mut rng, c, spec.organ_radius));
    }

    let n_dis = rng.gen_range(spec.distractors[0]..=spec.distractors[1]);
    let small = [spec.organ_radius[0] * 0.4, spec.organ_radius[1] * 0.6];
    let mut distractors = Vec::new();
    for _ in 0..n_dis {
        for _attempt in 0..50 {
            let c = [0, 1, 2].map(|a| rng.gen_range(0.0..dims[a] as f64));
            if union_level(&organ, c) < -(small[1] + 4.0) {
                distractors.push(Ellipsoid::random(&mut rng, c, small));
                break;
            }
        }
    }

    let mut level = Vec::with_capacity(dims.iter().product());
    for_each_voxel(dims, |p| level.push(union_level(&organ, p64(p))));
    let gt = LabelMask::mask(dims, level.iter().map(|&f| u8::from(f >= 0.0)).collect())?;
    let gbox = bounding_box(&gt)?;

    let tissue = Waves::random(&mut rng, 3, [30.0, 80.0], None);
    let noise = Normal::new(0.0, spec.noise_hu.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let contrast = spec.organ_hu - spec.background_hu;
    let mut image = Vec::with_capacity(level.len());
    let mut i = 0;
    for_each_voxel(dims, |p| {
        let q = p64(p);
        let d = union_level(&distractors, q);
        let mut hu = spec.background_hu + 15.0 * tissue.at(q);
        hu += contrast * sigmoid(level[i] / 0.7).max(if distractors.is_empty() { 0.0 } else { sigmoid(d / 0.7) });
        if spec.noise_hu > 0.0 {
            hu += noise.sample(&mut rng);
        }
        image.push(hu as f32);
        i += 1;
    });
    let image = Volume::image(dims, image)?;

    let mut scores = Vec::with_capacity(3);
    let mut slabs_all = Vec::with_capacity(3);
    for (axis, &rate) in spec.corruption.iter().enumerate() {
        let slabs = plan_slabs(&mut rng, rate, (gbox.lo[axis], gbox.hi[axis]));
        let jitter = if rate > 0.0 { spec.jitter } else { 0.0 };
        // Per-slice offsets follow an AR(1) process so neighbouring slices agree.
        let mut offset = vec![0.0; dims[axis]];
        if jitter > 0.0 {
            let step = Normal::new(0.0, jitter).map_err(|e| Error::Config(e.to_string()))?;
            let mut prev = step.sample(&mut rng);
            for o in offset.iter_mut() {
                prev = 0.7 * prev + 0.714 * step.sample(&mut rng);
                *o = prev;
            }
        }
        let wobble = Waves::random(&mut rng, 2, [16.0, 40.0], Some(axis));
        let mut slice_fx = vec![(0.0, 1.0); dims[axis]];
        for s in &slabs {
            for t in s.start..s.start + s.len {
                slice_fx[t] = match s.mode {
                    SlabMode::Eroded => (-s.depth, 1.0),
                    SlabMode::Zeroed => (0.0, 0.05),
                };
            }
        }
        let mut data = Vec::with_capacity(level.len());
        let mut i = 0;
        for_each_voxel(dims, |p| {
            let t = p[axis];
            let (shift, gain) = slice_fx[t];
            let mut f = level[i] + shift;
            if jitter > 0.0 {
                f += offset[t] + 0.7 * jitter * wobble.at(p64(p));
            }
            data.push((gain * sigmoid(f / spec.softness)) as f32);
            i += 1;
        });
        scores.push(Volume::score(dims, data)?);
        slabs_all.push(slabs);
    }
    let scores: [Volume<f32>; 3] = scores.try_into().map_err(|_| Error::Config("three views expected".into()))?;
    let mut case = Case::new(format!("phantom-{seed}"), image, gt, scores)?;
    case.slabs = Some(slabs_all.try_into().expect("three views"));
    Ok(case)
}
