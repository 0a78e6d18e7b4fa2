//! Fold planning and evaluation statistics.

use crate::error::{Error, Result};
use crate::volgrid::{dsc, LabelMask};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One segmentation model of a cross-cross-augmentation plan: trained on
/// every fold except the two it is named after.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegModel {
    pub id: String,
    pub excluded: [usize; 2],
    pub train_folds: Vec<usize>,
}

/// Produce fusion-training data on `generate_fold` for the experiment that
/// tests on `test_fold`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcaJob {
    pub test_fold: usize,
    pub generate_fold: usize,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Vec<String>>,
    pub models: Vec<SegModel>,
    pub jobs: Vec<CcaJob>,
}

impl FoldPlan {
    pub fn model(&self, id: &str) -> Option<&SegModel> {
        self.models.iter().find(|m| m.id == id)
    }
}

/// Shuffles `ids` into `k` folds (the first `n mod k` folds get one extra
/// case) and lists, for each test fold `k1` and each `k2 != k1`, the model
/// trained without `{k1, k2}` that generates data on fold `k2`.
pub fn cca_plan(k: usize, ids: &[String], seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("cross-cross-augmentation needs K >= 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Config(format!("K = {k} exceeds the {} available cases", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let n = base + usize::from(f < extra);
        folds.push(shuffled[at..at + n].to_vec());
        at += n;
    }

    let mut models = BTreeMap::new();
    let mut jobs = Vec::with_capacity(k * (k - 1));
    for k1 in 0..k {
        for k2 in (0..k).filter(|&k2| k2 != k1) {
            let excluded = [k1.min(k2), k1.max(k2)];
            let id = format!("seg-{}-{}", excluded[0], excluded[1]);
            models.entry(excluded).or_insert_with(|| SegModel {
                id: id.clone(),
                excluded,
                train_folds: (0..k).filter(|f| !excluded.contains(f)).collect(),
            });
            jobs.push(CcaJob { test_fold: k1, generate_fold: k2, model: id });
        }
    }
    Ok(FoldPlan { k, folds, models: models.into_values().collect(), jobs })
}

/// Disjoint seeded subsets of sizes `(n_seg, n_vfn, n_test)`.
pub fn standard_split(ids: &[String], n_seg: usize, n_vfn: usize, n_test: usize, seed: u64) -> Result<[Vec<String>; 3]> {
    if n_seg + n_vfn + n_test > ids.len() {
        return Err(Error::Config(format!("split {n_seg}+{n_vfn}+{n_test} exceeds {} cases", ids.len())));
    }
    let mut s = ids.to_vec();
    s.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = s[n_seg + n_vfn..n_seg + n_vfn + n_test].to_vec();
    let vfn = s[n_seg..n_seg + n_vfn].to_vec();
    s.truncate(n_seg);
    Ok([s, vfn, test])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    #[default]
    Two,
    /// Alternative: mean of `a - b` is positive.
    Greater,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
    pub mean_diff: f64,
    pub tail: Tail,
}

/// Paired Student t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64], tail: Tail) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Domain(format!("paired t-test needs two equal lists of at least 2, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let dof = d.len() - 1;
    if var == 0.0 {
        if mean == 0.0 {
            return Ok(TTest { t: 0.0, p: 1.0, dof, mean_diff: 0.0, tail });
        }
        return Err(Error::Domain("differences have zero variance and nonzero mean".into()));
    }
    let t = mean / (var / n).sqrt();
    let p = match tail {
        Tail::Two => 2.0 * student_t_sf(t.abs(), dof as f64),
        Tail::Greater => student_t_sf(t, dof as f64),
    };
    Ok(TTest { t, p: p.clamp(f64::MIN_POSITIVE, 1.0), dof, mean_diff: mean, tail })
}

/// `P(T > t)` for Student's t with `nu` degrees of freedom.
pub fn student_t_sf(t: f64, nu: f64) -> f64 {
    let x = nu / (nu + t * t);
    let half = 0.5 * reg_inc_beta(0.5 * nu, 0.5, x);
    if t >= 0.0 {
        half
    } else {
        1.0 - half
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - reg_inc_beta(b, a, 1.0 - x);
    }
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..500 {
        let m = m as f64;
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        for n in [num, -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0))] {
            d = 1.0 + n * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + n / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            f *= c * d;
        }
        if (c * d - 1.0).abs() < 1e-15 {
            break;
        }
    }
    ln_front.exp() * f / a
}

/// Summary statistics of per-case Dice scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dsc: Vec<f64>,
    #[serde(rename = "Average")]
    pub mean: f64,
    /// Sample standard deviation (0 for one case).
    #[serde(rename = "Std")]
    pub std: f64,
    #[serde(rename = "Min")]
    pub min: f64,
    #[serde(rename = "Q1")]
    pub q1: f64,
    #[serde(rename = "Med")]
    pub median: f64,
    #[serde(rename = "Q3")]
    pub q3: f64,
    #[serde(rename = "Max")]
    pub max: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vs_baseline: Option<TTest>,
}

/// Linear interpolation between order statistics at rank `p * (n - 1)`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let (lo, frac) = (h.floor() as usize, h - h.floor());
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

impl EvalReport {
    pub fn from_scores(dsc: Vec<f64>) -> Result<Self> {
        if dsc.is_empty() {
            return Err(Error::Domain("cannot summarize an empty score list".into()));
        }
        if dsc.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite score".into()));
        }
        let mut s = dsc.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let std = if s.len() > 1 { (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Ok(Self {
            mean,
            std,
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
            dsc,
            vs_baseline: None,
        })
    }

    /// Attaches a paired test of these scores against `baseline`'s.
    pub fn compare(mut self, baseline: &EvalReport, tail: Tail) -> Result<Self> {
        self.vs_baseline = Some(paired_t_test(&self.dsc, &baseline.dsc, tail)?);
        Ok(self)
    }

    /// One table row, in percent.
    pub fn row(&self, name: &str) -> String {
        format!(
            "{name:<16} {:>6.2} ± {:<5.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2}",
            100.0 * self.mean,
            100.0 * self.std,
            100.0 * self.min,
            100.0 * self.q1,
            100.0 * self.median,
            100.0 * self.q3,
            100.0 * self.max
        )
    }

    pub fn header() -> String {
        format!("{:<16} {:>14} {:>6} {:>6} {:>6} {:>6} {:>6}", "Approach", "Average", "Min", "Q1", "Med", "Q3", "Max")
    }
}

/// Per-case Dice of aligned prediction and truth lists.
pub fn evaluate(pred: &[LabelMask], gt: &[LabelMask]) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::Domain(format!("{} predictions for {} ground truths", pred.len(), gt.len())));
    }
    EvalReport::from_scores(pred.iter().zip(gt).map(|(p, g)| dsc(p, g)).collect::<Result<_>>()?)
}
