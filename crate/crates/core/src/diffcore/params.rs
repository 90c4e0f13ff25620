use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Grads, Tape, Var};
use super::Tensor;
use crate::{Error, Result};

/// One named parameter and whether the optimizer may change it.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

pub type GradMap = BTreeMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param { value, trainable: true });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::contract(format!(
                "shape mismatch for `{name}`: {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    /// Set the flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.values_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    /// Copy every entry of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: &ParamSet) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Subset with names starting with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zeros_like(&self) -> GradMap {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape())))
            .collect()
    }

    /// Round every value to the nearest `f32`, the storage precision of checkpoints.
    pub fn round_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            p.value = p.value.map(|x| x as f32 as f64);
        }
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    /// Normal(0, std) with the given shape.
    pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
    }

    /// Xavier/Glorot-uniform for a `[out, in]` weight.
    pub fn xavier(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> Tensor {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim).map(|_| rng.random_range(-a..a)).collect();
        Tensor::from_parts(vec![out_dim, in_dim], data)
    }
}

/// Puts parameters of a [`ParamSet`] on a tape, once each.
///
/// Trainable parameters become gradient-carrying leaves; frozen ones are
/// recorded as constants so no work is spent differentiating them.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamSet,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamSet) -> Self {
        Binder {
            tape,
            params,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let v = if p.trainable {
            self.tape.leaf(p.value.clone(), true)
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Like [`Binder::param`] for call sites where the name is known to exist.
    pub fn p(&self, name: &str) -> Var<'t> {
        self.param(name).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Gradient for every parameter of the set; zeros where unreachable or frozen.
    pub fn collect(&self, grads: &Grads) -> GradMap {
        let bound = self.bound.borrow();
        self.params
            .iter()
            .map(|(name, p)| {
                let g = bound
                    .get(name)
                    .and_then(|v| grads.get(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Reverse pass from a scalar loss to gradients for every parameter.
pub fn forward_backward(loss: Var<'_>, binder: &Binder<'_, '_>) -> Result<GradMap> {
    let grads = binder.tape().backward(loss)?;
    Ok(binder.collect(&grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(ps.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::vector(vec![3.0])).unwrap();
        ps.insert("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &ps);
        let x = b.p("x");
        let loss = x.mul(x).sum();
        let g = forward_backward(loss, &b).unwrap();
        assert_eq!(g["x"].data(), &[6.0]);
        assert_eq!(g["p"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_parameter_is_constant_on_tape() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::vector(vec![3.0])).unwrap();
        ps.set_trainable("x", false).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &ps);
        assert!(!b.p("x").requires_grad());
    }
}
