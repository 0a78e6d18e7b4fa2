use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use volfuse_core::datapipe::*;
use volfuse_core::fusion::{binarize, majority_vote};
use volfuse_core::tensor::Tensor;
use volfuse_core::volgrid::{dsc, LabelMask, Roi, Volume};

const DRAWS: usize = 10_000;
// 80^3 ROI, 64^3 windows: 17 admissible origins per axis
const BINS: usize = 17;
// upper 0.1% point of chi-square with 16 degrees of freedom
const CHI2_CRIT: f64 = 39.252;

#[test]
fn origins_are_uniform_over_an_80_cubed_roi() {
    let crit = ChiSquared::new((BINS - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!((crit - CHI2_CRIT).abs() < 1e-2, "{crit}");
    let roi = Roi::new([10, 20, 5], [89, 99, 84]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = [[0usize; BINS]; 3];
    for _ in 0..DRAWS {
        let o = sample_origin(&roi, [128, 128, 128], PATCH, &mut rng);
        for a in 0..3 {
            let k = o[a] - roi.lo[a] as i64;
            assert!((0..BINS as i64).contains(&k), "axis {a} origin {}", o[a]);
            counts[a][k as usize] += 1;
        }
    }
    let expect = DRAWS as f64 / BINS as f64;
    for (a, c) in counts.iter().enumerate() {
        let chi2: f64 = c.iter().map(|&n| (n as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < CHI2_CRIT, "axis {a}: chi2 {chi2:.2}");
    }
}

#[test]
fn default_phantoms_hit_the_calibration_targets() {
    let spec = PhantomSpec::default();
    let (mut views, mut mv, mut worst) = ([0.0; 3], 0.0, 0.0);
    let n = 50;
    for seed in 0..n {
        let case = gen_phantom(&spec, 1000 + seed).unwrap();
        let [c, s, a] = case.scores.each_ref().map(|v| binarize(v, 0.5).unwrap());
        let d = [dsc(&c, &case.gt).unwrap(), dsc(&s, &case.gt).unwrap(), dsc(&a, &case.gt).unwrap()];
        for v in 0..3 {
            views[v] += d[v] / n as f64;
        }
        worst += d.iter().cloned().fold(f64::INFINITY, f64::min) / n as f64;
        mv += dsc(&majority_vote(&c, &s, &a).unwrap(), &case.gt).unwrap() / n as f64;
    }
    for v in views {
        assert!((0.70..=0.95).contains(&v), "view mean {v}");
    }
    assert!(mv > worst, "MV {mv} vs worst view {worst}");
}

#[test]
fn label_patch_is_the_ground_truth_crop() {
    let spec = PhantomSpec { dims: [72, 80, 70], ..PhantomSpec::default() };
    let case = normalize(&gen_phantom(&spec, 4).unwrap(), &HuWindow::default()).unwrap();
    let roi = training_roi(&case).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let s = sample_patch(&case, &roi, Channels::ALL, &mut rng).unwrap();
        assert_eq!(s.x.shape(), &[4, PATCH, PATCH, PATCH]);
        let o = s.origin;
        let d = case.dims();
        for (i, &v) in s.y.data().iter().enumerate() {
            let (x, y, z) = (i % PATCH, (i / PATCH) % PATCH, i / (PATCH * PATCH));
            let p = [o[0] + x as i64, o[1] + y as i64, o[2] + z as i64];
            let inside = (0..3).all(|a| p[a] >= 0 && p[a] < d[a] as i64);
            let want = if inside { f32::from(case.gt.get(p[0] as usize, p[1] as usize, p[2] as usize)) } else { 0.0 };
            assert_eq!(v, want);
            // channel 3 is the axial score
            let ax = s.x.data()[3 * PATCH * PATCH * PATCH + i];
            let want = if inside { case.scores[2].get(p[0] as usize, p[1] as usize, p[2] as usize) } else { 0.0 };
            assert_eq!(ax, want);
        }
    }
}

fn binary_patch(rng: &mut ChaCha8Rng, s: usize) -> Tensor<f32> {
    Tensor::from_vec(&[1, s, s, s], (0..s * s * s).map(|_| f32::from(rng.gen_range(0..2u8))).collect()).unwrap()
}

fn patch_dsc(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let s = a.shape()[1];
    let m = |t: &Tensor<f32>| LabelMask::mask([s; 3], t.data().iter().map(|&v| v as u8).collect()).unwrap();
    dsc(&m(a), &m(b)).unwrap()
}

proptest! {
    #[test]
    fn orientation_preserves_dsc(seed in any::<u64>(), s in 1usize..6, g in 0usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, p) = (binary_patch(&mut rng, s), binary_patch(&mut rng, s));
        let o = orientation_group()[g];
        prop_assert_eq!(patch_dsc(&o.apply(&y).unwrap(), &o.apply(&p).unwrap()), patch_dsc(&y, &p));
    }

    #[test]
    fn normalize_is_idempotent(seed in any::<u64>(), lo in -500.0f32..0.0, width in 1.0f32..800.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [3, 4, 5];
        let n = 60;
        let image = Volume::image(dims, (0..n).map(|_| rng.gen_range(-1200.0..1500.0)).collect()).unwrap();
        let mut score = || Volume::score(dims, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let scores = [score(), score(), score()];
        let gt = LabelMask::mask(dims, (0..n).map(|i| u8::from(i % 3 == 0)).collect()).unwrap();
        let case = Case::new("p".into(), image, gt, scores).unwrap();
        let w = HuWindow { lo, hi: lo + width };
        let once = normalize(&case, &w).unwrap();
        prop_assert!(once.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&normalize(&once, &w).unwrap(), &once);
    }
}
