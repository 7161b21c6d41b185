//! Named tensor collections.

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// An ordered map from tensor name to tensor.
///
/// Order is insertion order and is part of a network's layout: layers refer
/// to their parameters by position, and gradients come back in the same
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightSet {
    tensors: IndexMap<String, Matrix>,
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor and return its position.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let (index, _) = self.tensors.insert_full(name.into(), value);
        index
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn at(&self, index: usize) -> &Matrix {
        &self.tensors[index]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.tensors[index]
    }

    pub fn name_at(&self, index: usize) -> &str {
        self.tensors.get_index(index).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.dim())))
                .collect(),
        }
    }

    /// Hash of names and shapes; equal for two weight sets of the same architecture.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.tensors {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
        }
        format!("{:x}", h.finalize())[..16].to_string()
    }

    /// Hash of the exact parameter values.
    pub fn value_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.tensors {
            h.update(name.as_bytes());
            for x in m.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())[..16].to_string()
    }

    /// Check that `other` has the same names, in any order, with equal shapes.
    pub fn check_aligned(&self, other: &WeightSet, context: &str) -> Result<()> {
        for (name, m) in &self.tensors {
            let o = other
                .get(name)
                .ok_or_else(|| Error::Weights(format!("{context}: tensor `{name}` missing")))?;
            if o.dim() != m.dim() {
                return Err(Error::Weights(format!(
                    "{context}: tensor `{name}` has shape {:?}, expected {:?}",
                    o.dim(),
                    m.dim()
                )));
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(Error::Weights(format!(
                "{context}: unexpected tensor `{extra}`"
            )));
        }
        Ok(())
    }

    /// Squared L2 norm over every tensor.
    pub fn squared_norm(&self) -> f64 {
        self.tensors.values().map(|m| m.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    /// Replace tensor values from a list aligned with this set's order.
    pub fn assign_from(&mut self, values: &[Matrix]) {
        for (slot, v) in self.tensors.values_mut().zip(values) {
            slot.assign(v);
        }
    }

    /// Flatten every tensor, in order, into one vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|m| m.iter().copied()).collect()
    }

    /// Inverse of [`WeightSet::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in self.tensors.values_mut() {
            for x in m.iter_mut() {
                *x = flat[offset];
                offset += 1;
            }
        }
    }
}

impl FromIterator<(String, Matrix)> for WeightSet {
    fn from_iter<I: IntoIterator<Item = (String, Matrix)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn architecture_hash_ignores_values() {
        let mut a = WeightSet::new();
        a.insert("w", array![[1.0, 2.0]]);
        let mut b = a.clone();
        b.get_mut("w").unwrap()[[0, 0]] = 5.0;
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        assert_ne!(a.value_hash(), b.value_hash());
    }

    #[test]
    fn alignment_rejects_missing_and_misshaped() {
        let mut a = WeightSet::new();
        a.insert("w", array![[1.0, 2.0]]);
        let mut b = WeightSet::new();
        b.insert("v", array![[1.0, 2.0]]);
        assert!(a.check_aligned(&b, "test").is_err());
        let mut c = WeightSet::new();
        c.insert("w", array![[1.0], [2.0]]);
        assert!(a.check_aligned(&c, "test").is_err());
        assert!(a.check_aligned(&a.clone(), "test").is_ok());
    }

    #[test]
    fn flatten_roundtrip() {
        let mut a = WeightSet::new();
        a.insert("w", array![[1.0, 2.0], [3.0, 4.0]]);
        a.insert("b", array![[5.0]]);
        let flat = a.flatten();
        let mut z = a.zeros_like();
        z.unflatten(&flat);
        assert_eq!(a, z);
    }
}
