use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor and its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub momentum: Vec<f64>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let momentum = vec![0.0; value.len()];
        Self {
            value: value.with_requires_grad(true),
            momentum,
        }
    }
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGroup {
    params: BTreeMap<String, Param>,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument {
                op: "ParamGroup::insert",
                msg: format!("duplicate parameter name {name}"),
            });
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.value.zero_grad());
    }
}

/// SGD with heavy-ball momentum: `v = momentum * v + g; w = w - lr * v`.
/// Gradients are cleared afterwards. Every parameter must carry a gradient.
pub fn sgd_step(params: &mut ParamGroup, lr: f64, momentum: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.value.grad().is_none()) {
        return Err(Error::MissingGrad(name.clone()));
    }
    for p in params.params.values_mut() {
        let g = p.value.take_grad().expect("checked above");
        let Param { value, momentum: v } = p;
        for ((w, vi), gi) in value.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vi = momentum * *vi + gi;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(w: f64) -> ParamGroup {
        let mut g = ParamGroup::new();
        g.insert("w", Tensor::full(&[1], w)).unwrap();
        g
    }

    fn set_grad(g: &mut ParamGroup, v: f64) {
        g.get_mut("w").unwrap().value.set_grad(vec![v]).unwrap();
    }

    fn w(g: &ParamGroup) -> f64 {
        g.get("w").unwrap().value.data()[0]
    }

    #[test]
    fn plain_step() {
        let mut g = group(1.0);
        set_grad(&mut g, 0.5);
        sgd_step(&mut g, 0.1, 0.0).unwrap();
        assert!((w(&g) - 0.95).abs() < 1e-15);
        assert!(g.get("w").unwrap().value.grad().is_none());
    }

    #[test]
    fn zero_grad_leaves_weight() {
        let mut g = group(1.0);
        set_grad(&mut g, 0.0);
        sgd_step(&mut g, 0.1, 0.9).unwrap();
        assert_eq!(w(&g), 1.0);
    }

    #[test]
    fn momentum_two_steps() {
        let mut g = group(1.0);
        set_grad(&mut g, 1.0);
        sgd_step(&mut g, 0.1, 0.9).unwrap();
        let after_one = w(&g);
        set_grad(&mut g, 1.0);
        sgd_step(&mut g, 0.1, 0.9).unwrap();
        assert!((1.0 - after_one - 0.1).abs() < 1e-12);
        assert!((after_one - w(&g) - 0.19).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut g = group(1.0);
        assert_eq!(sgd_step(&mut g, 0.1, 0.0), Err(Error::MissingGrad("w".into())));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut g = group(1.0);
        assert!(g.insert("w", Tensor::zeros(&[1])).is_err());
    }
}
