use super::VfnModel;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{sgd_step, BnMode, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Smoothing term of the Dice loss.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Iteration indices from which the rate is multiplied by `drop_factor`.
    pub lr_drops: Vec<usize>,
    pub drop_factor: f64,
    pub momentum: f64,
    /// Width of the loss-averaging intervals in the report.
    pub log_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            batch: 16,
            lr: 0.01,
            lr_drops: vec![20_000, 25_000],
            drop_factor: 0.1,
            momentum: 0.9,
            log_every: 100,
        }
    }
}

impl TrainSchedule {
    /// The default schedule compressed to `iterations`, keeping the drop
    /// points at the same fractions (2/3 and 5/6).
    pub fn scaled(iterations: usize, batch: usize) -> Self {
        Self {
            iterations,
            batch,
            lr_drops: vec![iterations * 2 / 3, iterations * 5 / 6],
            log_every: (iterations / 20).max(1),
            ..Self::default()
        }
    }

    /// This schedule stretched to `iterations`, drop points keeping their
    /// relative positions.
    pub fn with_iterations(&self, iterations: usize) -> Self {
        let scale = |d: usize| ((d as u128 * iterations as u128) / self.iterations.max(1) as u128) as usize;
        Self {
            iterations,
            lr_drops: self.lr_drops.iter().map(|&d| scale(d)).collect(),
            log_every: scale(self.log_every).max(1),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.lr_drops.iter().any(|&d| d >= self.iterations) {
            return Err(Error::Config(format!("lr drops {:?} must precede iteration {}", self.lr_drops, self.iterations)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr must be finite and non-negative, momentum in [0, 1)".into()));
        }
        if self.log_every < 1 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate used at 0-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| it >= d).count();
        self.lr * self.drop_factor.powi(drops as i32)
    }
}

/// Random training patches.
pub trait PatchSource {
    fn channels(&self) -> usize;
    fn is_empty(&self) -> bool;
    /// One `(C, S, S, S)` input patch and its `(1, S, S, S)` binary label.
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainInterval {
    pub start: usize,
    pub end: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub iterations: usize,
    pub intervals: Vec<TrainInterval>,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.intervals.first().map(|i| i.mean_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.intervals.last().map(|i| i.mean_loss)
    }
}

fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let shape = items[0].shape().to_vec();
    if shape.len() != 4 || items.iter().any(|t| t.shape() != shape) {
        return Err(shape_err!("patches must share one (C, S, S, S) shape"));
    }
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(&[items.len(), shape[0], shape[1], shape[2], shape[3]], data)
}

/// Mini-batch Dice-loss SGD. Patches are drawn in a fixed order from one
/// seeded generator, so a run is reproducible bit for bit.
pub fn train(model: &mut VfnModel<f32>, data: &dyn PatchSource, schedule: &TrainSchedule, seed: u64) -> Result<TrainReport> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.channels() != model.config.in_channels {
        return Err(shape_err!("data has {} channels, model expects {}", data.channels(), model.config.in_channels));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TrainReport { iterations: schedule.iterations, intervals: Vec::new() };
    let mut acc = 0.0;
    for it in 0..schedule.iterations {
        let (xs, ys): (Vec<_>, Vec<_>) = (0..schedule.batch).map(|_| data.draw(&mut rng)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        let mut g = Graph::new();
        let x = g.constant(stack(&xs)?);
        let y = g.constant(stack(&ys)?);
        let p = model.forward(&mut g, x, BnMode::Train)?;
        let loss = g.dice_loss(p, y, DICE_EPS)?;
        let l = f64::from(g.value(loss).data()[0]);
        if !l.is_finite() {
            return Err(Error::Numeric(format!("loss is {l} at iteration {it}")));
        }
        g.backward(loss)?;
        g.write_param_grads(&mut model.params)?;
        drop(g);
        let lr = schedule.lr_at(it);
        sgd_step(&mut model.params, lr, schedule.momentum);

        acc += l;
        let start = it - it % schedule.log_every;
        if it + 1 == schedule.iterations || (it + 1) % schedule.log_every == 0 {
            let mean_loss = acc / (it + 1 - start) as f64;
            log::info!("iterations {start}..{}: loss {mean_loss:.4}, lr {:.1e}", it + 1, schedule.lr_at(start));
            report.intervals.push(TrainInterval { start, end: it + 1, lr: schedule.lr_at(start), mean_loss });
            acc = 0.0;
        }
    }
    if !model.all_finite() {
        return Err(Error::Numeric("non-finite parameters after training".into()));
    }
    Ok(report)
}
