use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{s, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`; for weights feeding a relu.
    He {
        fan_in: usize,
    },
    /// Uniform in `±1 / sqrt(fan_in)`.
    FanIn {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// Deterministic initial value. Each parameter draws from its own stream
    /// keyed by `(seed, name)`, and values are drawn in `f64` so `f32` and
    /// `f64` builds of one config start from the same point.
    fn materialize<T: Scalar>(&self, seed: u64) -> Tensor<T> {
        let n: usize = self.shape.iter().product();
        let data = match self.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::He { fan_in } | Init::FanIn { fan_in } => {
                let bound = match self.init {
                    Init::He { .. } => (6.0 / fan_in as f64).sqrt(),
                    _ => 1.0 / (fan_in as f64).sqrt(),
                };
                let mut rng = rng_for(seed, &format!("init:{}", self.name));
                (0..n).map(|_| s(rng.random_range(-bound..bound))).collect()
            }
        };
        Tensor::new(self.shape.clone(), data).expect("param shape")
    }
}

/// Ordered, named parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Self {
        let mut store = Self {
            entries: Vec::with_capacity(specs.len()),
            index: HashMap::new(),
        };
        for spec in specs {
            store.push(spec.name.clone(), spec.materialize(seed));
        }
        store
    }

    fn push(&mut self, name: String, t: Tensor<T>) {
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.entries[i].1)
    }

    /// Replace a value, keeping the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(name, slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Register every parameter on `g` as a gradient-tracked leaf.
    pub fn register(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Name-indexed view of the parameter vars registered for one forward pass.
pub(crate) struct Bound<'a, T> {
    pub store: &'a ParamStore<T>,
    pub vars: &'a [Var],
}

impl<T: Scalar> Bound<'_, T> {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        self.vars[i]
    }
}
