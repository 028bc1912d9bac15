//! Named parameter storage.

use std::collections::btree_map;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trainable tensors keyed by unique name. Iteration is sorted by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> btree_map::IterMut<'_, String, Tensor> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Replaces every tensor with the same-named one from `other`.
    ///
    /// Fails on the first name missing from `other` or on a shape mismatch.
    /// Names in `other` that this store does not know are rejected as well.
    pub fn assign_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, current) in &self.tensors {
            let incoming = other
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if incoming.shape() != current.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: expected {:?}, found {:?}",
                    current.shape(),
                    incoming.shape()
                )));
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        for (name, t) in self.tensors.iter_mut() {
            *t = other.get(name).unwrap().clone();
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParameterStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParameterStore {
            tensors: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a ParameterStore {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::zeros([1])).unwrap();
        s.insert("a", Tensor::zeros([2])).unwrap();
        assert!(s.insert("a", Tensor::zeros([2])).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(s.num_scalars(), 3);
    }

    #[test]
    fn assign_from_reports_missing_and_misshapen() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros([2])).unwrap();
        s.insert("b", Tensor::zeros([1])).unwrap();

        let mut missing = ParameterStore::new();
        missing.insert("w", Tensor::ones([2])).unwrap();
        let err = s.clone().assign_from(&missing).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");

        let mut bad = missing.clone();
        bad.insert("b", Tensor::ones([3])).unwrap();
        let err = s.clone().assign_from(&bad).unwrap_err().to_string();
        assert!(err.contains("shape mismatch"), "{err}");

        let mut ok = missing;
        ok.insert("b", Tensor::ones([1])).unwrap();
        s.assign_from(&ok).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, 1.0]);
    }
}
