//! Named parameter storage shared by models, the optimizer and checkpoints.

use std::collections::HashMap;

use crate::error::TensorError;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, uniquely named set of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    lookup: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Weight tensor drawn from Normal(0, std²).
    pub fn insert_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut RngStream) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::lit(std * rng.normal())).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn insert_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, Tensor::full(shape.to_vec(), S::lit(value)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.lookup.get(name).map(|&i| &self.values[i])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.values
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replace the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<(), TensorError> {
        let &i = self
            .lookup
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param set",
                lhs: self.values[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[i] = value;
        Ok(())
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>, requires_grad: bool) -> BoundParams {
        BoundParams { vars: self.values.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect() }
    }
}

/// Tape handles for every parameter of a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient for each parameter; zeros where the loss does not depend on it.
    pub fn collect_grads<S: Scalar>(&self, params: &ParamSet<S>, grads: &mut Gradients<S>) -> Vec<Tensor<S>> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect()
    }
}
