use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether LARS applies its trust ratio to this tensor.
    pub lars_adapt: bool,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, lars_adapt: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            name,
            Param {
                value,
                grad,
                lars_adapt,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Adds `grad` into the named gradient buffer.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        self.get_mut(name)?.grad.add_assign(grad)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Merges all entries of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.entries {
            self.insert(name, p.value, p.lars_adapt)?;
        }
        Ok(())
    }

    /// Copies out the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// True when every value tensor is bit-identical to `other`'s.
    pub fn values_bit_identical(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]), false).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[3]), false).is_err());
        assert_eq!(s.get("w").unwrap().grad.shape(), &[2]);
    }

    #[test]
    fn accumulate_checks_shape() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]), false).unwrap();
        let g = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        s.accumulate("w", &g).unwrap();
        s.accumulate("w", &g).unwrap();
        assert_eq!(s.get("w").unwrap().grad.data(), &[2.0, 4.0]);
        assert!(s.accumulate("w", &Tensor::zeros(&[3])).is_err());
        s.zero_grads();
        assert_eq!(s.get("w").unwrap().grad.data(), &[0.0, 0.0]);
    }
}
