//! Named learnable tensors.

use std::collections::HashMap;

use crate::{numel, Result, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Owns every parameter of a model. Ids are stable insertion indices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        values: Vec<T>,
        requires_grad: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if values.len() != numel(shape) {
            return Err(TensorError::Invalid(format!(
                "parameter {name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        &self.params[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].values
    }

    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Freezing drops any gradient the parameter was holding.
    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        let p = &mut self.params[id.0];
        p.requires_grad = flag;
        if !flag {
            p.grad = None;
        }
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.values.len())
            .sum()
    }

    /// Adds `grad` into the parameter's buffer. Ignored for frozen parameters.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return;
        }
        debug_assert_eq!(grad.len(), p.values.len());
        match &mut p.grad {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => p.grad = Some(grad.to_vec()),
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies values of every parameter whose name exists in `other` with the same shape.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(&oid) = other.by_name.get(&p.name) {
                let o = &other.params[oid.0];
                if o.shape == p.shape {
                    p.values.clone_from(&o.values);
                    copied += 1;
                }
            }
        }
        copied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameter_never_accumulates() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", &[2], vec![1.0, 2.0], false).unwrap();
        s.accumulate_grad(id, &[1.0, 1.0]);
        assert!(s.grad(id).is_none());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", &[1], vec![0.0], true).unwrap();
        assert!(s.add("w", &[1], vec![0.0], true).is_err());
        assert!(s.add("x", &[2], vec![0.0], true).is_err());
    }
}
