//! Named trainable parameters and the flat set the model trains over.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.dims());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Insertion-ordered parameter collection. Iteration order is the insertion
/// order, which keeps checkpoints and SGD updates deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    items: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Logic(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.items.len());
        self.items.push(Parameter::new(name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.items[i])
    }

    /// Value lookup that panics on a missing name; model code uses fixed
    /// name sets, so absence is a programming error.
    pub fn value(&self, name: &str) -> &Tensor {
        &self
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let i = *self.index.get(name)?;
        Some(&mut self.items[i])
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Accumulate a gradient tensor into the named parameter.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) {
        let p = self
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        assert_eq!(p.grad.dims(), grad.dims());
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
    }

    /// Plain gradient descent: w <- w - lr * g for every parameter.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.items {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }

    /// Bit-level equality of all values, for "parameters unchanged" checks.
    pub fn values_bit_eq(&self, other: &ParamSet) -> bool {
        self.items.len() == other.items.len()
            && self
                .items
                .iter()
                .zip(&other.items)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    pub fn named_values(&self) -> Vec<(String, &Tensor)> {
        self.items
            .iter()
            .map(|p| (p.name.clone(), &p.value))
            .collect()
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut ps = ParamSet::new();
        for (name, value) in named {
            ps.add(name, value)?;
        }
        Ok(ps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            ps.add("w", Tensor::zeros(&[2])),
            Err(Error::Logic(_))
        ));
    }

    #[test]
    fn sgd_applies_gradients() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        ps.accumulate_grad("w", &Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        ps.sgd_step(0.1);
        assert_eq!(ps.value("w").data(), &[0.95, 2.1]);
    }

    #[test]
    fn zero_grads_resets() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(&[2])).unwrap();
        ps.accumulate_grad("w", &Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        ps.zero_grads();
        assert_eq!(ps.get("w").unwrap().grad.data(), &[0.0, 0.0]);
    }
}
