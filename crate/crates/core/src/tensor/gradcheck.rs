//! Central finite-difference checks of analytic gradients, in 64-bit.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor; entries whose gradients are both below it are compared
/// in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose `+h` and `-h` evaluations took different ReLU or
    /// max-pool branches; central differences are meaningless there.
    pub skipped: usize,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradcheckReport {
    pub fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((input, index, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &GradcheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error >= self.max_rel_error && other.worst.is_some() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Shape(format!("gradcheck needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Compares the tape's gradients of scalar `f(inputs)` with respect to every
/// element of every input against central differences.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    gradcheck_entries(f, inputs, &all)
}

/// Like [`gradcheck`], but inputs with more than `max_per_input` elements
/// are checked at a seeded random subset of that size.
pub fn gradcheck_sampled<F>(f: F, inputs: &[Tensor<f64>], max_per_input: usize, seed: u64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.numel() <= max_per_input {
                (0..t.numel()).collect()
            } else {
                let mut v = rand::seq::index::sample(&mut rng, t.numel(), max_per_input).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect();
    gradcheck_entries(f, inputs, &picks)
}

/// Checks the listed flat indices of each input.
pub fn gradcheck_entries<F>(f: F, inputs: &[Tensor<f64>], entries: &[Vec<usize>]) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if entries.len() != inputs.len() {
        return Err(Error::Shape("one index list per input is required".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let pattern = g.activation_pattern();
    drop(g);

    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((scalar_of(&g, out)?, g.activation_pattern()))
    };

    let mut report = GradcheckReport::default();
    let mut xs = inputs.to_vec();
    for (i, (grads, idx)) in analytic.iter().zip(entries).enumerate() {
        for &j in idx {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let (up, pu) = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let (down, pd) = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            if pu != pattern || pd != pattern {
                report.skipped += 1;
                continue;
            }
            report.record(i, j, grads[j], (up - down) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// [`gradcheck`] at inputs drawn uniformly from `[-1, 1]`.
pub fn gradcheck_random<F>(f: F, shapes: &[&[usize]], seed: u64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::from_vec(s, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        })
        .collect::<Result<_>>()?;
    gradcheck(f, &inputs)
}
