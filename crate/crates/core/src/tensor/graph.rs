//! The tape. Every operation appends a node holding its output; `backward`
//! walks the nodes in reverse execution order and accumulates adjoints.

use super::conv::ConvGeom;
use super::ops::{self, BatchNormStats, BnSaved};
use super::param::{ParamId, ParamStore};
use super::{Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Deconv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, arg: Vec<u32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    Dice { p: Var, y: Var, denom: f64, numer: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; kept only for leaves.
    grad: Option<Vec<T>>,
    param: Option<ParamId>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not need a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf bound to a stored parameter; see [`Graph::write_param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.get(id).value.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (y, geom) = ops::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(y, Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed convolution with weight `(C_in, C_out, k, k, k)`.
    pub fn deconv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (y, geom) = ops::deconv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(y, Op::Deconv { x, w, b, geom }, rg))
    }

    pub fn maxpool3d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (y, arg) = ops::maxpool3d(self.value(x), k, stride)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::MaxPool { x, arg }, rg))
    }

    /// Batch normalization. `Train` normalizes with batch statistics over
    /// `(N, D, H, W)` and updates `stats`; `Infer` uses `stats` only.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: BnMode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let (y, saved) = match mode {
            BnMode::Train => ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), stats, eps, momentum)?,
            BnMode::Infer => ops::batchnorm_infer(self.value(x), self.value(gamma), self.value(beta), stats, eps, "batchnorm")?,
        };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, saved }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.map(x, |v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.map(x, ops::sigmoid);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, what: &str) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("{what}: shapes {:?} and {:?} differ", ta.shape(), tb.shape()));
        }
        Ok(Tensor { shape: ta.shape.clone(), data: ta.data.iter().zip(&tb.data).map(|(&p, &q)| f(p, q)).collect() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip(a, b, |p, q| p + q, "add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip(a, b, |p, q| p * q, "mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// `1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)` over all elements.
    pub fn dice_loss(&mut self, p: Var, y: Var, eps: f64) -> Result<Var> {
        let (loss, sp, sy, spy) = ops::dice_loss(self.value(p), self.value(y), eps)?;
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::Dice { p, y, denom: sp + sy + eps, numer: 2.0 * spy + eps }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let node = &self.nodes[i];
            let emit = |v: Var, d: Vec<T>, adj: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.iter_mut().zip(d).for_each(|(a, x)| *a += x),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, geom } => {
                    let need_dx = self.nodes[x.0].requires_grad;
                    let r = ops::conv3d_backward(self.value(*x), self.value(*w), geom, &g, need_dx);
                    if let Some(dx) = r.dx {
                        emit(*x, dx, &mut adj);
                    }
                    emit(*w, r.dw, &mut adj);
                    if let Some(b) = b {
                        emit(*b, r.db, &mut adj);
                    }
                }
                Op::Deconv { x, w, b, geom } => {
                    let need_dx = self.nodes[x.0].requires_grad;
                    let r = ops::deconv3d_backward(self.value(*x), self.value(*w), geom, &g, need_dx);
                    if let Some(dx) = r.dx {
                        emit(*x, dx, &mut adj);
                    }
                    emit(*w, r.dw, &mut adj);
                    if let Some(b) = b {
                        emit(*b, r.db, &mut adj);
                    }
                }
                Op::MaxPool { x, arg } => {
                    let dx = ops::maxpool3d_backward(self.value(*x).shape(), arg, &g);
                    emit(*x, dx, &mut adj);
                }
                Op::BatchNorm { x, gamma, beta, saved } => {
                    let (dx, dg, db) = ops::batchnorm_backward(self.value(*x), self.value(*gamma).data(), saved, &g);
                    emit(*x, dx, &mut adj);
                    emit(*gamma, dg, &mut adj);
                    emit(*beta, db, &mut adj);
                }
                Op::Relu { x } => {
                    let y = &node.value.data;
                    let dx = g.iter().zip(y).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect();
                    emit(*x, dx, &mut adj);
                }
                Op::Sigmoid { x } => {
                    let y = &node.value.data;
                    let dx = g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                    emit(*x, dx, &mut adj);
                }
                Op::Add { a, b } => {
                    emit(*a, g.clone(), &mut adj);
                    emit(*b, g, &mut adj);
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    let da = g.iter().zip(vb).map(|(&d, &q)| d * q).collect();
                    let db = g.iter().zip(va).map(|(&d, &p)| d * p).collect();
                    emit(*a, da, &mut adj);
                    emit(*b, db, &mut adj);
                }
                Op::Sum { x } => {
                    let n = self.value(*x).numel();
                    emit(*x, vec![g[0]; n], &mut adj);
                }
                Op::Dice { p, y, denom, numer } => {
                    let scale = g[0].to_f64().unwrap_or(f64::NAN);
                    let (s, nn) = (*denom, *numer);
                    let dp = self
                        .value(*y)
                        .data
                        .iter()
                        .map(|&t| T::lit(-scale * (2.0 * t.to_f64().unwrap_or(f64::NAN) * s - nn) / (s * s)))
                        .collect();
                    emit(*p, dp, &mut adj);
                }
            }
        }
        Ok(())
    }

    /// Hash of every piecewise-linear branch taken so far: ReLU activity and
    /// max-pool winners. Two evaluations with equal patterns lie on the same
    /// smooth piece of the function.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { .. } => {
                    i.hash(&mut h);
                    for chunk in node.value.data.chunks(64) {
                        let bits = chunk.iter().enumerate().fold(0u64, |b, (j, &v)| b | (u64::from(v > T::zero()) << j));
                        bits.hash(&mut h);
                    }
                }
                Op::MaxPool { arg, .. } => {
                    i.hash(&mut h);
                    arg.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Adds the gradients of parameter leaves into `store` and clears them here.
    pub fn write_param_grads(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for node in &mut self.nodes {
            let (Some(id), Some(g)) = (node.param, node.grad.take()) else { continue };
            let p = store.get_mut(id);
            if p.grad.len() != g.len() {
                return Err(Error::Shape(format!("gradient for `{}` has wrong length", p.name)));
            }
            p.grad.iter_mut().zip(g).for_each(|(a, x)| *a += x);
        }
        Ok(())
    }
}
