//! Named parameter storage and the per-forward binding of parameters onto a
//! tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors. Models hold [`ParamId`]s
/// into a store; optimizers and checkpoints operate on the store directly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{} is {:?}, got {:?}", self.names[id.0], self.tensors[id.0].shape(), value.shape()),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Session<'a> {
    /// With `trainable` false, parameters are bound as constants and no
    /// gradients are tracked.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Session { tape: Tape::new(), store, bound: vec![None; store.len()], trainable }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients from the last backward call, indexed like the store.
    /// Parameters that did not take part in the loss yield `None`.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound.iter().map(|b| b.and_then(|v| self.tape.grad(v)).map(<[f64]>::to_vec)).collect()
    }
}

/// Normal(0, std) truncated to ±2·std, the usual transformer weight init.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be positive and finite");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Uniform(−1/√fan_in, 1/√fan_in).
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_binds_each_parameter_once() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::ones([2]));
        let b = store.add("b", Tensor::ones([2]));
        let mut s = Session::new(&store, true);
        let va = s.p(a);
        assert_eq!(s.p(a), va);
        let sq = s.tape.mul(va, va).unwrap();
        let loss = s.tape.sum(sq).unwrap();
        s.tape.backward(loss).unwrap();
        let grads = s.param_grads();
        assert_eq!(grads[a.index()].as_deref(), Some(&[2.0, 2.0][..]));
        assert!(grads[b.index()].is_none());
    }

    #[test]
    fn set_rejects_shape_changes() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::ones([2]));
        assert!(store.set(a, Tensor::ones([3])).is_err());
        assert!(store.set(a, Tensor::zeros([2])).is_ok());
        assert_eq!(store.find("a"), Some(a));
        assert_eq!(store.num_scalars(), 2);
    }
}
