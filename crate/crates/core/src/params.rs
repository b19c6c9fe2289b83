//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stable handle to a parameter inside one [`ParamStore`] (and its clones).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

/// Parameters keyed by unique hierarchical names such as
/// `backbone.stage2.embed.w`. Iteration is always in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad: None, frozen });
        Ok(id)
    }

    /// Registers a parameter initialised uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
        frozen: bool,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound));
        self.register(name, value, frozen)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.by_name.values().map(move |&id| (id, &self.params[id.0]))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.by_name.values().copied().collect()
    }

    /// Number of scalar values held by parameters whose name starts with any of `prefixes`.
    pub fn count_with_prefix(&self, prefixes: &[&str]) -> usize {
        self.iter()
            .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                let g = Tensor::new(p.value.shape().to_vec(), delta.to_vec()).expect("grad matches parameter shape");
                p.grad = Some(g);
            }
        }
    }

    /// SHA-256 over every parameter (name, shape, little-endian values) in name order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, p) in self.iter() {
            hasher.update((p.name.len() as u64).to_le_bytes());
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.register("a.w", Tensor::zeros([2]), false).unwrap();
        assert!(s.register("a.w", Tensor::zeros([2]), false).is_err());
    }

    #[test]
    fn iteration_is_sorted_by_name() {
        let mut s = ParamStore::new();
        for n in ["z", "b.2", "a", "b.10"] {
            s.register(n, Tensor::zeros([1]), false).unwrap();
        }
        let names: Vec<_> = s.iter().map(|(_, p)| p.name.clone()).collect();
        assert_eq!(names, ["a", "b.10", "b.2", "z"]);
    }

    #[test]
    fn checksum_detects_single_value_change() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_fn([3], |i| i as f64), true).unwrap();
        let before = s.checksum();
        assert_eq!(before, s.checksum());
        s.by_name_mut("w").unwrap().value.data_mut()[1] += 1e-12;
        assert_ne!(before, s.checksum());
    }
}
