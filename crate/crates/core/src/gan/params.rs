//! Named parameter tensors and their binding into computation graphs.

use crate::autodiff::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Ordered collection of named parameter tensors. Layer structs hold indices
/// into this set; the order is fixed at construction and is the payload
/// order in checkpoints.
#[derive(Clone, Debug)]
pub struct ParamSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> usize {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<T>()))
                .collect(),
        }
    }

    /// Insert every tensor into `graph`, as trainable params or constants.
    pub fn bind(&self, graph: &mut Graph<S>, trainable: bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Binding { vars }
    }
}

/// Graph handles for one [`ParamSet::bind`] call, in parameter order.
pub struct Binding {
    pub vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// He-style normal init for conv / dense weights: std = sqrt(2 / fan_in).
pub fn he_init<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_val(normal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Uniform init in [-bound, bound], for dense heads.
pub fn uniform_init<S: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_val(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}
