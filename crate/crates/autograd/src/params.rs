use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Named parameters, ordered by name. A tensor's `requires_grad` flag is its
/// trainable flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.params.insert(name, tensor.with_requires_grad(trainable));
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
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

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.params.get(name).map(|t| t.requires_grad)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .requires_grad = trainable;
        Ok(())
    }

    /// Sets the trainable flag of every parameter from `rule(name)`.
    pub fn set_trainable_by(&mut self, rule: impl Fn(&str) -> bool) {
        for (name, t) in &mut self.params {
            t.requires_grad = rule(name);
        }
    }

    /// Number of scalars in trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|t| t.requires_grad)
            .map(Tensor::numel)
            .sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over names, shapes and the exact bytes of every parameter
    /// whose name satisfies `filter`.
    pub fn fingerprint(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| filter(n)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]), true).unwrap();
        assert_eq!(
            s.insert("a", Tensor::zeros(&[2]), true),
            Err(TensorError::DuplicateParam("a".into()))
        );
    }

    #[test]
    fn trainable_scalars_count() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2, 3]), true).unwrap();
        s.insert("b", Tensor::zeros(&[4]), false).unwrap();
        assert_eq!(s.trainable_scalars(), 6);
        s.set_trainable_by(|n| n == "b");
        assert_eq!(s.trainable_scalars(), 4);
    }

    #[test]
    fn fingerprint_detects_single_bit_change() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::ones(&[3]), true).unwrap();
        let before = s.fingerprint(|_| true);
        let v = &mut s.get_mut("a").unwrap().data_mut()[1];
        *v = f64::from_bits(v.to_bits() ^ 1);
        assert_ne!(before, s.fingerprint(|_| true));
        assert_eq!(s.fingerprint(|n| n != "a"), ParamStore::new().fingerprint(|_| true));
    }
}
