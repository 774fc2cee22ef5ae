use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{AutogradError, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, ParamTensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter shape/data mismatch");
        self.tensors.insert(
            name.into(),
            ParamTensor {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Moves every tensor of `other` into `self`, replacing duplicates.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Sub-store of every tensor whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, shape, vec![T::zero(); shape.iter().product()]);
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, shape, vec![T::one(); shape.iter().product()]);
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..shape.iter().product())
            .map(|_| T::c(dist.sample(rng)))
            .collect();
        self.insert(name, shape, data);
    }

    /// Glorot-uniform init for a `[fan_in, fan_out]` weight.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| T::c(dist.sample(rng))).collect();
        self.insert(name, &[fan_in, fan_out], data);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamW<T> {
    /// Registers every parameter of `store` whose name starts with one of `prefixes`.
    pub fn new(config: AdamWConfig, store: &ParamStore<T>, prefixes: &[&str]) -> Self {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, p) in store.iter() {
            if prefixes.iter().any(|pre| name.starts_with(pre)) {
                first.insert(name.to_string(), vec![T::zero(); p.data.len()]);
                second.insert(name.to_string(), vec![T::zero(); p.data.len()]);
            }
        }
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn registered(&self) -> impl Iterator<Item = &str> {
        self.first.keys().map(String::as_str)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        for name in self.first.keys() {
            if !grads.contains_key(name) {
                return Err(AutogradError::MissingGrad(name.clone()));
            }
            if !store.contains(name) {
                return Err(AutogradError::UnknownParam(name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::c(c.lr);
        let decay = T::c(c.lr * c.weight_decay);
        let (b1, b2, eps) = (T::c(c.beta1), T::c(c.beta2), T::c(c.eps));
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        for (name, m) in self.first.iter_mut() {
            let v = self.second.get_mut(name).expect("moments registered together");
            let g = &grads[name];
            let p = store.get_mut(name).expect("checked above");
            if g.len() != p.data.len() {
                return Err(AutogradError::Shape {
                    op: "adamw",
                    lhs: p.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
            for i in 0..g.len() {
                let shrink = decay * p.data[i];
                p.data[i] -= shrink;
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bias1;
                let vh = v[i] / bias2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors as `(name, first, second)`, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[T], &[T])> {
        self.first
            .iter()
            .map(|(k, m)| (k.as_str(), m.as_slice(), self.second[k].as_slice()))
    }

    /// Restores step counter and moments saved by [`AdamW::moments`].
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, (Vec<T>, Vec<T>)>) -> Result<()> {
        for name in self.first.keys() {
            if !moments.contains_key(name) {
                return Err(AutogradError::MissingGrad(name.clone()));
            }
        }
        for (name, (m, v)) in moments {
            if let Some(slot) = self.first.get_mut(&name) {
                *slot = m;
                *self.second.get_mut(&name).unwrap() = v;
            }
        }
        self.step = step;
        Ok(())
    }
}
