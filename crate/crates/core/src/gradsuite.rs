//! The gradient suite: every differentiable op and the full network,
//! checked against central differences in 64-bit.

use crate::error::Result;
use crate::tensor::gradcheck::{gradcheck, gradcheck_random, gradcheck_sampled, GradcheckReport};
use crate::tensor::{BatchNormStats, BnMode, Graph, Tensor, Var};
use crate::vfn::{build, VfnConfig, BN_EPS, BN_MOMENTUM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradcheckReport,
    pub passed: bool,
}

impl SuiteEntry {
    fn new(name: &str, report: GradcheckReport) -> Self {
        // Kink skips must stay rare or the check proves little.
        let passed = report.max_rel_error < TOLERANCE && report.skipped * 20 <= report.checked;
        Self { name: name.into(), report, passed }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape and length agree")
}

/// `sum(y * r)` for a fixed random `r`, so every output entry matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = g.constant(random(&shape, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Per-op checks on small random tensors.
pub fn op_suite() -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    out.push(SuiteEntry::new(
        "conv3d k3 s1 p1 + relu + mul",
        gradcheck_random(
            |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
                let r = g.relu(y);
                let s = g.mul(r, y)?;
                Ok(g.sum(s))
            },
            &[&[1, 2, 4, 4, 4], &[3, 2, 3, 3, 3], &[3]],
            1,
        )?,
    ));
    out.push(SuiteEntry::new(
        "conv3d k3 s2 p1",
        gradcheck_random(
            |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted_sum(g, y, 3)
            },
            &[&[2, 2, 5, 5, 5], &[2, 2, 3, 3, 3], &[2]],
            2,
        )?,
    ));
    out.push(SuiteEntry::new(
        "deconv3d k4 s2 p1",
        gradcheck_random(
            |g, v| {
                let y = g.deconv3d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted_sum(g, y, 4)
            },
            &[&[2, 2, 2, 3, 2], &[2, 3, 4, 4, 4], &[3]],
            3,
        )?,
    ));
    out.push(SuiteEntry::new(
        "maxpool3d 2/2",
        gradcheck_random(
            |g, v| {
                let y = g.maxpool3d(v[0], 2, 2)?;
                weighted_sum(g, y, 5)
            },
            &[&[2, 2, 4, 4, 4]],
            4,
        )?,
    ));
    out.push(SuiteEntry::new(
        "batchnorm train",
        gradcheck_random(
            |g, v| {
                let mut stats = BatchNormStats::new(3);
                let y = g.batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Train, BN_EPS, BN_MOMENTUM)?;
                weighted_sum(g, y, 6)
            },
            &[&[3, 3, 2, 3, 2], &[3], &[3]],
            5,
        )?,
    ));
    out.push(SuiteEntry::new(
        "batchnorm infer",
        gradcheck_random(
            |g, v| {
                let mut stats = BatchNormStats::new(2);
                stats.mean = vec![0.3, -0.2];
                stats.var = vec![0.5, 2.0];
                stats.assume_identity();
                let y = g.batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Infer, BN_EPS, BN_MOMENTUM)?;
                weighted_sum(g, y, 7)
            },
            &[&[2, 2, 2, 2, 2], &[2], &[2]],
            6,
        )?,
    ));
    out.push(SuiteEntry::new(
        "add + sigmoid",
        gradcheck_random(
            |g, v| {
                let a = g.add(v[0], v[1])?;
                let s = g.sigmoid(a);
                weighted_sum(g, s, 8)
            },
            &[&[1, 2, 3, 3, 3], &[1, 2, 3, 3, 3]],
            7,
        )?,
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let away: Vec<f64> = (0..64).map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    out.push(SuiteEntry::new(
        "relu",
        gradcheck(
            |g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, 10)
            },
            &[Tensor::from_vec(&[1, 1, 4, 4, 4], away)?],
        )?,
    ));
    let y = Tensor::from_vec(&[2, 1, 3, 3, 3], (0..54).map(|_| f64::from(rng.gen_range(0..2u8))).collect())?;
    out.push(SuiteEntry::new(
        "dice loss",
        gradcheck(
            |g, v| {
                let p = g.sigmoid(v[0]);
                let yv = g.constant(y.clone());
                g.dice_loss(p, yv, 1.0)
            },
            &[random(&[2, 1, 3, 3, 3], &mut rng)],
        )?,
    ));
    Ok(out)
}

/// Dice loss of a randomly initialized network on a random `side^3` patch,
/// differentiated with respect to every parameter and the input. Inputs
/// larger than `per_input` are checked at a random subset.
pub fn network_check(config: VfnConfig, side: usize, per_input: usize, seed: u64) -> Result<SuiteEntry> {
    let mut model = build::<f64>(config)?;
    model.init_random(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let c = config.in_channels;
    let n = side * side * side;
    let x = Tensor::from_vec(&[1, c, side, side, side], (0..c * n).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let y = Tensor::from_vec(&[1, 1, side, side, side], (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect())?;
    let mut inputs: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    inputs.push(x);
    let np = model.params.len();
    let report = gradcheck_sampled(
        |g, v| {
            let mut stats = model.bn_stats.clone();
            let p = model.forward_with(g, &v[..np], v[np], BnMode::Train, &mut stats)?;
            let yv = g.constant(y.clone());
            g.dice_loss(p, yv, 1.0)
        },
        &inputs,
        per_input,
        seed + 2,
    )?;
    Ok(SuiteEntry::new(&format!("vfn base {} on {side}^3", config.base_channels), report))
}

/// Ops plus the network at base width 4 on `16^3` patches.
pub fn full_suite() -> Result<Vec<SuiteEntry>> {
    let mut out = op_suite()?;
    out.push(network_check(VfnConfig { in_channels: 4, base_channels: 4 }, 16, 256, 7)?);
    Ok(out)
}
