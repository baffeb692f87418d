use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Tape leaves created for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, p: ParamId) -> NodeId {
        self.ids[p.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, p: ParamId) -> &Tensor<T> {
        &self.tensors[p.0]
    }

    pub fn get_mut(&mut self, p: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[p.0]
    }

    pub fn name(&self, p: ParamId) -> &str {
        &self.names[p.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { ids: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }

    /// Per-parameter gradients in store order; zeros where the loss does not
    /// reach a parameter.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.tensors
            .iter()
            .zip(&bound.ids)
            .map(|(t, &id)| match grads.get(id) {
                Some(g) => Ok(g.clone()),
                None => Tensor::zeros(t.shape().to_vec()),
            })
            .collect()
    }

    pub(crate) fn check_grads(&self, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(TensorError::ShapeMismatch {
                op: "optimizer_step",
                lhs: vec![self.tensors.len()],
                rhs: vec![grads.len()],
            });
        }
        for ((name, p), g) in self.names.iter().zip(&self.tensors).zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::GradientShape {
                    name: name.clone(),
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
        }
        Ok(())
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}
