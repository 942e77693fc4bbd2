//! Named parameter storage and the binding of parameters onto a tape.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Trainable tensors keyed by dotted path (`enc1.blstm0.fwd.w_ih`).
/// Iteration order is the lexicographic order of names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Names under `prefix.`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names()
            .filter(move |n| n.strip_prefix(prefix).is_some_and(|r| r.starts_with('.')))
    }

    /// Matrix drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}

/// A tape together with lazily bound parameters.
///
/// Each parameter is copied onto the tape the first time it is requested;
/// the set of requested names doubles as an access log. Parameters rejected
/// by the trainable filter are bound as constants.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_filter(params, |_| true)
    }

    /// Binds every parameter as a constant.
    pub fn frozen(params: &'p ParamStore) -> Self {
        Self::with_filter(params, |_| false)
    }

    pub fn with_filter(params: &'p ParamStore, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable: Box::new(trainable),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .clone();
        let v = if (self.trainable)(name) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Names of every parameter read so far.
    pub fn accessed(&self) -> BTreeSet<String> {
        self.bound.keys().cloned().collect()
    }

    /// Gradients of trainable parameters touched by the last backward pass.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.tape.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
