use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let (r, c) = (value.rows(), value.cols());
        let value = value.reshaped(vec![r, c])?;
        let grad = Tensor::zeros(r, c);
        self.entries.insert(name, Parameter { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name).map(|p| &mut p.value)
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor, scale: f64) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.len() != grad.len() {
            return Err(Error::Dimension {
                what: format!("gradient for `{name}`"),
                expected: p.grad.len(),
                got: grad.len(),
            });
        }
        p.grad.add_scaled(grad, scale);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|p| p.grad.squared_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(1, 1)),
            Err(Error::DuplicateParameter(_))
        ));
        assert_eq!(s.get("w").unwrap().grad.shape(), &[2, 2]);
    }

    #[test]
    fn accumulate_checks_shape() {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::zeros(1, 3)).unwrap();
        s.accumulate("b", &Tensor::filled(1, 3, 2.0), 0.5).unwrap();
        assert_eq!(s.get("b").unwrap().grad.data(), &[1.0, 1.0, 1.0]);
        assert!(s.accumulate("b", &Tensor::zeros(1, 2), 1.0).is_err());
        assert!((s.grad_norm() - 3f64.sqrt()).abs() < 1e-15);
    }
}
