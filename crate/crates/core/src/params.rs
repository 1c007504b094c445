//! Named parameter storage and its binding onto a graph.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::{Shape, Tensor};

/// Parameters keyed by hierarchical path, e.g. `enc.0.1.sh.conv.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter path {name}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
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

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }
}

/// Seeded parameter initializer. Draw order follows declaration order, so a
/// given seed and architecture always produce the same tensors.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `U(-b, b)` with `b = 1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, shape: Shape) -> Tensor {
        let fan_in = (shape.c * shape.h * shape.w).max(1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform(&mut self, shape: Shape, bound: f64) -> Tensor {
        let data = (0..shape.numel()).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("length matches shape")
    }
}

/// Every parameter of a store registered as a graph leaf.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn bind(g: &mut Graph, store: &ParamStore) -> Self {
        let vars = store.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}
