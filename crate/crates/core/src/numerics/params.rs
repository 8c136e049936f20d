//! Named parameter store shared by the policy, connector and decoder.
//!
//! Parameters live here between steps; a training step binds them into a
//! fresh tape as leaves, builds the loss, and reads gradients back out by
//! name. Iteration order is insertion order and is the canonical order
//! for checkpoints and optimizer state.

use std::collections::HashMap;

use super::tape::{Tape, Var};
use super::tensor::{Elem, Tensor};

#[derive(Debug, Clone)]
pub struct ParamStore<E: Elem> {
    entries: Vec<(String, Tensor<E>)>,
    index: HashMap<String, usize>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<E>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<E> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<F: Elem>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (n, t) in &self.entries {
            out.insert(n, t.cast());
        }
        out
    }

    /// L2 distance between two stores with identical layouts.
    pub fn l2_distance(&self, other: &ParamStore<E>) -> f64 {
        let mut acc = 0.0;
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            assert_eq!(na, nb, "param store layout mismatch");
            for (x, y) in ta.data.iter().zip(&tb.data) {
                let d = x.to_f64() - y.to_f64();
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    /// Names of tensors that differ bitwise between two stores.
    pub fn diff_names(&self, other: &ParamStore<E>) -> Vec<String> {
        self.entries
            .iter()
            .zip(&other.entries)
            .filter(|((_, a), (_, b))| a.data != b.data)
            .map(|((n, _), _)| n.clone())
            .collect()
    }

    /// Bind every parameter into `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<E>) -> BoundParams {
        let mut map = HashMap::new();
        for (n, t) in &self.entries {
            map.insert(n.clone(), tape.leaf(t.clone()));
        }
        BoundParams { map }
    }
}

/// Name -> tape leaf mapping for one graph construction.
pub struct BoundParams {
    map: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(n, v)| (n.as_str(), *v))
    }
}
