use rand::Rng;

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Rows whose gradient is always discarded (the text PAD row).
    pub frozen_rows: Vec<usize>,
}

/// Ordered collection of every parameter group of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

/// Graph leaves created for one forward pass, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            frozen_rows: Vec::new(),
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::of(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub fn freeze_row(&mut self, id: ParamId, row: usize) {
        let (r, c) = self.params[id.0].value.dims2();
        assert!(row < r);
        let p = &mut self.params[id.0];
        p.value.data_mut()[row * c..(row + 1) * c]
            .iter_mut()
            .for_each(|v| *v = S::zero());
        p.frozen_rows.push(row);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a gradient-tracking leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<S>) -> Bound {
        Bound {
            nodes: self
                .params
                .iter()
                .map(|p| graph.leaf(p.value.clone(), true))
                .collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Copies the gradients that backward left on the bound leaves,
    /// overwriting the accumulators. Frozen rows stay at zero.
    pub fn collect_grads(&mut self, graph: &Graph<S>, bound: &Bound) {
        for (p, &node) in self.params.iter_mut().zip(&bound.nodes) {
            match graph.grad(node) {
                Some(g) => p.grad.data_mut().copy_from_slice(g.data()),
                None => p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero()),
            }
            let (_, c) = p.grad.dims2();
            for &row in &p.frozen_rows {
                p.grad.data_mut()[row * c..(row + 1) * c]
                    .iter_mut()
                    .for_each(|g| *g = S::zero());
            }
        }
    }

    /// Replaces every value, checking names and shapes against `other`.
    pub fn load_values(&mut self, other: &[(String, Tensor<S>)]) -> Result<(), TensorError> {
        if other.len() != self.params.len() {
            return Err(TensorError::shape(
                "load_values",
                format!("{} groups, expected {}", other.len(), self.params.len()),
            ));
        }
        for (p, (name, value)) in self.params.iter_mut().zip(other) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(TensorError::shape(
                    "load_values",
                    format!(
                        "{name} {:?} does not match {} {:?}",
                        value.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
            p.value = value.clone();
        }
        Ok(())
    }
}
