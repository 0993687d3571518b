use std::collections::{BTreeMap, BTreeSet};

use crate::{AdError, Result, Tensor};

/// All learnable weights of a model, keyed by slash-namespaced names.
/// Iteration order is the name order, so every consumer is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor<f32>>,
    frozen: BTreeSet<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(AdError::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                if slot.shape() != tensor.shape() {
                    return Err(AdError::ShapeMismatch {
                        op: "param set",
                        lhs: slot.shape().to_vec(),
                        rhs: tensor.shape().to_vec(),
                    });
                }
                *slot = tensor;
                Ok(())
            }
            None => Err(AdError::MissingParam(name.to_string())),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.frozen.remove(name);
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar entries across all parameters.
    pub fn entry_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Entry counts grouped by leading namespace component.
    pub fn count_by_namespace(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.params {
            let ns = name.split('/').next().unwrap_or(name).to_string();
            *out.entry(ns).or_insert(0) += t.len();
        }
        out
    }

    /// Freeze every parameter whose name starts with one of the patterns.
    pub fn freeze_matching(&mut self, patterns: &[&str]) -> usize {
        let mut n = 0;
        for name in self.params.keys() {
            if patterns.iter().any(|p| name.starts_with(p)) && self.frozen.insert(name.clone()) {
                n += 1;
            }
        }
        n
    }

    pub fn clear_frozen(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Canonical little-endian bytes of one parameter, for hashing.
    pub fn param_bytes(&self, name: &str) -> Option<Vec<u8>> {
        let t = self.params.get(name)?;
        let mut out = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_is_prefix_based_and_subset_of_names() {
        let mut p = ParamSet::new();
        p.insert("backbone/patch/w", Tensor::vector(vec![1.0]))
            .unwrap();
        p.insert("backbone/layer0/w", Tensor::vector(vec![1.0]))
            .unwrap();
        p.insert("expert/w", Tensor::vector(vec![1.0])).unwrap();
        let n = p.freeze_matching(&["backbone/patch/"]);
        assert_eq!(n, 1);
        assert!(p.is_frozen("backbone/patch/w"));
        assert!(!p.is_frozen("backbone/layer0/w"));
        for name in p.frozen_names() {
            assert!(p.contains(name));
        }
    }

    #[test]
    fn duplicate_insert_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0])).unwrap();
        assert!(p.insert("w", Tensor::vector(vec![2.0])).is_err());
    }
}
