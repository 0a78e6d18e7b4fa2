//! The fusion network: three conv-conv-pool stages, three deconv stages with
//! same-scale additive highways, and a 1x1x1 output conv with sigmoid.

mod rf;
mod train;

pub use rf::{canonical_layers, receptive_field_of, receptive_field_trace, Layer, RfStep};
pub use train::{train, PatchSource, TrainInterval, TrainReport, TrainSchedule};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    read_checkpoint, write_checkpoint, BatchNormStats, BnMode, Element, Graph, ParamId, ParamStore, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const STAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VfnConfig {
    /// 4 with the image channel, 3 without.
    pub in_channels: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
}

fn default_base() -> usize {
    16
}

impl Default for VfnConfig {
    fn default() -> Self {
        Self { in_channels: 4, base_channels: default_base() }
    }
}

impl VfnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of down stage `s`.
    pub fn width(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (c, b) = (self.in_channels, self.base_channels);
        let conv = |i: usize, o: usize, k: usize| i * o * k * k * k + o;
        let bn = |o: usize| 2 * o;
        let mut n = 0;
        let mut cin = c;
        for s in 0..STAGES {
            let w = b << s;
            n += conv(cin, w, 3) + bn(w) + conv(w, w, 3) + bn(w);
            cin = w;
        }
        // deconvs: 4b -> 4b, 4b -> 2b, 2b -> b
        n += conv(4 * b, 4 * b, 4) + bn(4 * b);
        n += conv(4 * b, 2 * b, 4) + bn(2 * b);
        n += conv(2 * b, b, 4) + bn(b);
        n + conv(b, 1, 1)
    }
}

pub fn receptive_field(_config: &VfnConfig) -> usize {
    receptive_field_of(&canonical_layers())
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    k: usize,
    deconv: bool,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: ConvIds,
    gamma: ParamId,
    beta: ParamId,
    /// Index into the running-statistics list.
    bn: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    down: [[Block; 2]; STAGES],
    /// Deepest first: `up[0]` restores 1/4 scale, `up[2]` full scale.
    up: [Block; STAGES],
    out: ConvIds,
}

#[derive(Clone, Debug)]
pub struct VfnModel<T: Element = f32> {
    pub config: VfnConfig,
    pub params: ParamStore<T>,
    pub bn_stats: Vec<BatchNormStats<T>>,
    bn_names: Vec<String>,
    layout: Layout,
}

struct Builder<T: Element> {
    params: ParamStore<T>,
    stats: Vec<BatchNormStats<T>>,
    names: Vec<String>,
}

impl<T: Element> Builder<T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, deconv: bool) -> Result<ConvIds> {
        let shape = if deconv { [cin, cout, k, k, k] } else { [cout, cin, k, k, k] };
        let w = self.params.add(format!("{name}.weight"), Tensor::zeros(&shape))?;
        let b = self.params.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(ConvIds { w, b, k, deconv })
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, deconv: bool) -> Result<Block> {
        let conv = self.conv(&format!("{name}.{}", if deconv { "deconv" } else { "conv" }), cin, cout, if deconv { 4 } else { 3 }, deconv)?;
        let gamma = self.params.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], T::one()))?;
        let beta = self.params.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]))?;
        self.stats.push(BatchNormStats::new(cout));
        self.names.push(format!("{name}.bn"));
        Ok(Block { conv, gamma, beta, bn: self.stats.len() - 1 })
    }
}

/// Builds a model with zero weights, unit BN scales and untouched running
/// statistics. Call one of the `init_*` methods before training.
pub fn build<T: Element>(config: VfnConfig) -> Result<VfnModel<T>> {
    config.validate()?;
    let mut bld = Builder { params: ParamStore::new(), stats: Vec::new(), names: Vec::new() };
    let mut down = Vec::new();
    let mut cin = config.in_channels;
    for s in 0..STAGES {
        let w = config.width(s);
        let a = bld.block(&format!("down{s}.0"), cin, w, false)?;
        let b = bld.block(&format!("down{s}.1"), w, w, false)?;
        down.push([a, b]);
        cin = w;
    }
    let mut up = Vec::new();
    for s in (0..STAGES).rev() {
        let cout = config.width(s);
        up.push(bld.block(&format!("up{s}"), cin, cout, true)?);
        cin = cout;
    }
    let out = bld.conv("out", cin, 1, 1, false)?;
    let layout = Layout {
        down: down.try_into().expect("three stages"),
        up: up.try_into().expect("three stages"),
        out,
    };
    Ok(VfnModel { config, params: bld.params, bn_stats: bld.stats, bn_names: bld.names, layout })
}

impl<T: Element> VfnModel<T> {
    fn convs(&self) -> Vec<ConvIds> {
        let l = &self.layout;
        l.down.iter().flatten().chain(&l.up).map(|b| b.conv).chain([l.out]).collect()
    }

    fn fan_in(&self, c: &ConvIds) -> usize {
        let s = self.params.get(c.w).value.shape();
        if c.deconv {
            // each output voxel receives (k / stride)^3 taps per input channel
            s[0] * (c.k / 2).pow(3)
        } else {
            s[1] * c.k.pow(3)
        }
    }

    /// Gaussian weights with std `sqrt(2 / fan_in)`, zero biases, unit BN
    /// scales, zero BN shifts. Running statistics are reset.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in self.convs() {
            let std = (2.0 / self.fan_in(&c) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let p = self.params.get_mut(c.w);
            p.value.data_mut().iter_mut().for_each(|v| *v = T::lit(normal.sample(&mut rng)));
        }
        self.reset_affine(T::zero());
    }

    /// All conv and deconv weights set to `c`; everything else as in
    /// [`VfnModel::init_random`].
    pub fn init_constant(&mut self, c: f64) {
        for conv in self.convs() {
            self.params.get_mut(conv.w).value.data_mut().iter_mut().for_each(|v| *v = T::lit(c));
        }
        self.reset_affine(T::zero());
    }

    fn reset_affine(&mut self, bias: T) {
        for c in self.convs() {
            self.params.get_mut(c.b).value.data_mut().iter_mut().for_each(|v| *v = bias);
        }
        let l = self.layout.clone();
        for b in l.down.iter().flatten().chain(&l.up) {
            self.params.get_mut(b.gamma).value.data_mut().iter_mut().for_each(|v| *v = T::one());
            self.params.get_mut(b.beta).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        for p in self.params.iter_mut() {
            p.momentum.iter_mut().for_each(|m| *m = T::zero());
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
        for s in &mut self.bn_stats {
            *s = BatchNormStats::new(s.mean.len());
        }
    }

    pub fn bn_ready(&self) -> bool {
        self.bn_stats.iter().all(|s| s.is_initialized())
    }

    /// Marks default running statistics as usable without training.
    pub fn assume_identity_stats(&mut self) {
        self.bn_stats.iter_mut().for_each(|s| s.assume_identity());
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let d = x.dims5()?;
        if d[1] != self.config.in_channels {
            return Err(shape_err!("model expects {} input channels, got {}", self.config.in_channels, d[1]));
        }
        if d[2..].iter().any(|&s| s == 0 || s % 8 != 0) {
            return Err(shape_err!("spatial dims {:?} must be positive multiples of 8", &d[2..]));
        }
        Ok(())
    }

    /// Records the forward pass on `g` using `pv[i]` as parameter `i` and
    /// returns the sigmoid scores.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        x: Var,
        mode: BnMode,
        stats: &mut [BatchNormStats<T>],
    ) -> Result<Var> {
        if pv.len() != self.params.len() || stats.len() != self.bn_names.len() {
            return Err(shape_err!("parameter or statistics list does not match the model"));
        }
        self.check_input(g.value(x))?;
        let p = |id: ParamId| pv[id.index()];
        let mut block = |g: &mut Graph<T>, b: &Block, x: Var| -> Result<Var> {
            let c = b.conv;
            let y = if c.deconv {
                g.deconv3d(x, p(c.w), Some(p(c.b)), 2, 1)?
            } else {
                g.conv3d(x, p(c.w), Some(p(c.b)), 1, 1)?
            };
            let y = g.batchnorm(y, p(b.gamma), p(b.beta), &mut stats[b.bn], mode, BN_EPS, BN_MOMENTUM)?;
            Ok(g.relu(y))
        };
        let l = &self.layout;
        let mut skips = Vec::with_capacity(STAGES);
        let mut h = x;
        for stage in &l.down {
            h = block(g, &stage[0], h)?;
            h = block(g, &stage[1], h)?;
            skips.push(h);
            h = g.maxpool3d(h, 2, 2)?;
        }
        for up in &l.up {
            h = block(g, up, h)?;
            h = g.add(h, skips.pop().expect("one skip per stage"))?;
        }
        let z = g.conv3d(h, p(l.out.w), Some(p(l.out.b)), 1, 0)?;
        Ok(g.sigmoid(z))
    }

    /// Forward pass with parameters bound to the store, so that
    /// [`Graph::write_param_grads`] reaches them. `Train` mode updates the
    /// running statistics.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: BnMode) -> Result<Var> {
        let pv: Vec<Var> = (0..self.params.len()).map(|i| g.param(&self.params, ParamId(i))).collect();
        let mut stats = std::mem::take(&mut self.bn_stats);
        let out = self.forward_with(g, &pv, x, mode, &mut stats);
        self.bn_stats = stats;
        out
    }

    /// Scores for a batch `(N, C, S, S, S)` in inference mode. Pure: the
    /// model is not modified.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.bn_ready() {
            return Err(Error::UninitializedStats("model has no running batch-norm statistics".into()));
        }
        let mut g = Graph::new();
        let pv: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let xv = g.constant(x.clone());
        let mut stats = self.bn_stats.clone();
        let out = self.forward_with(&mut g, &pv, xv, BnMode::Infer, &mut stats)?;
        Ok(g.into_value(out))
    }

    pub fn cast<U: Element>(&self) -> VfnModel<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.add(p.name.clone(), p.value.cast()).expect("names are unique");
        }
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect();
        let bn_stats = self
            .bn_stats
            .iter()
            .map(|s| BatchNormStats { mean: conv(&s.mean), var: conv(&s.var), updates: s.updates })
            .collect();
        VfnModel { config: self.config, params, bn_stats, bn_names: self.bn_names.clone(), layout: self.layout.clone() }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite()) && self.bn_stats.iter().all(|s| s.all_finite())
    }
}

/// JSON written next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub config: VfnConfig,
    pub seed: u64,
    pub schedule: TrainSchedule,
    pub param_count: usize,
}

impl VfnModel<f32> {
    /// Parameters, then per BN layer its running mean, variance and update
    /// count.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut v: Vec<(String, Tensor<f32>)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, s) in self.bn_names.iter().zip(&self.bn_stats) {
            let c = s.mean.len();
            v.push((format!("{name}.running_mean"), Tensor::from_vec(&[c], s.mean.clone()).expect("length c")));
            v.push((format!("{name}.running_var"), Tensor::from_vec(&[c], s.var.clone()).expect("length c")));
            v.push((format!("{name}.updates"), Tensor::scalar(s.updates as f32)));
        }
        v
    }

    pub fn load_entries(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let expected = self.params.len() + 3 * self.bn_stats.len();
        if entries.len() != expected {
            return Err(Error::Decode(format!("checkpoint has {} entries, model needs {expected}", entries.len())));
        }
        let lookup = |name: &str, shape: &[usize]| -> Result<&Tensor<f32>> {
            let t = entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Decode(format!("checkpoint lacks `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Decode(format!("`{name}` has shape {:?}, model needs {shape:?}", t.shape())));
            }
            Ok(t)
        };
        for i in 0..self.params.len() {
            let p = self.params.get(ParamId(i));
            let t = lookup(&p.name, p.value.shape())?.clone();
            self.params.get_mut(ParamId(i)).value = t;
        }
        for (name, s) in self.bn_names.iter().zip(self.bn_stats.iter_mut()) {
            let c = s.mean.len();
            s.mean = lookup(&format!("{name}.running_mean"), &[c])?.data().to_vec();
            s.var = lookup(&format!("{name}.running_var"), &[c])?.data().to_vec();
            s.updates = lookup(&format!("{name}.updates"), &[1])?.data()[0] as u64;
        }
        Ok(())
    }

    /// Writes `<path>` (checkpoint) and `<path>.json` (manifest).
    pub fn save(&self, path: impl AsRef<Path>, seed: u64, schedule: &TrainSchedule) -> Result<()> {
        let path = path.as_ref();
        write_checkpoint(path, &self.checkpoint_entries())?;
        let manifest = ModelManifest { config: self.config, seed, schedule: schedule.clone(), param_count: self.params.numel() };
        std::fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, ModelManifest)> {
        let path = path.as_ref();
        let manifest: ModelManifest = serde_json::from_slice(&std::fs::read(manifest_path(path))?)?;
        let mut model = build(manifest.config)?;
        model.load_entries(&read_checkpoint(path)?)?;
        Ok((model, manifest))
    }
}

pub fn manifest_path(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
