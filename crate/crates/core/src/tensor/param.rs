use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub momentum: Vec<T>,
}

/// Ordered, uniquely named parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let n = value.numel();
        self.params.push(Parameter { name, value, grad: vec![T::zero(); n], momentum: vec![T::zero(); n] });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

/// Momentum SGD: `buf = momentum * buf + grad; value -= lr * buf`, then
/// gradients are zeroed.
pub fn sgd_step<T: Element>(store: &mut ParamStore<T>, lr: f64, momentum: f64) {
    let (lr, mom) = (T::lit(lr), T::lit(momentum));
    for p in store.iter_mut() {
        for ((v, g), b) in p.value.data_mut().iter_mut().zip(p.grad.iter_mut()).zip(p.momentum.iter_mut()) {
            *b = mom * *b + *g;
            *v = *v - lr * *b;
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn plain_step() {
        let (mut s, id) = single(1.0);
        s.get_mut(id).grad[0] = 2.0;
        sgd_step(&mut s, 0.1, 0.0);
        assert!((s.get(id).value.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.get(id).grad[0], 0.0);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut s, id) = single(0.0);
        let mut trace = vec![];
        for _ in 0..2 {
            s.get_mut(id).grad[0] = 1.0;
            sgd_step(&mut s, 1.0, 0.9);
            trace.push(s.get(id).value.data()[0]);
        }
        assert!((trace[0] + 1.0).abs() < 1e-12);
        assert!((trace[1] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_is_noop_and_names_unique() {
        let (mut s, id) = single(3.5);
        sgd_step(&mut s, 0.5, 0.9);
        assert_eq!(s.get(id).value.data()[0], 3.5);
        assert!(s.add("p", Tensor::scalar(0.0)).is_err());
        assert_eq!(s.find("p"), Some(id));
    }
}
