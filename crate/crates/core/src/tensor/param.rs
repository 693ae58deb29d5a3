use rand::Rng;

use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor<f32>,
    /// Whether weight decay applies (weights yes, biases no).
    pub decay: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, mut tensor: Tensor<f32>, decay: bool) -> Self {
        tensor.requires_grad = true;
        Parameter {
            name: name.into(),
            tensor,
            decay,
        }
    }

    /// Kaiming-uniform weights scaled for a leaky ReLU with `slope`.
    pub fn kaiming_uniform(name: impl Into<String>, shape: &[usize], fan_in: usize, slope: f64, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
        let tensor = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound) as f32);
        Parameter::new(name, tensor, true)
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Parameter::new(name, Tensor::zeros(shape.to_vec()), false)
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Ordered table of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Parameter) -> Result<ParamId> {
        if self.params.iter().any(|q| q.name == p.name) {
            return Err(Error::Config(format!("duplicate parameter name {}", p.name)));
        }
        self.params.push(p);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// `(name, shape)` for every parameter, in table order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect()
    }

    /// Graph leaves for one forward pass. With `track` false the leaves are
    /// constants and no graph is recorded through them.
    pub fn bind<T: Scalar>(&self, track: bool) -> Vec<Var<T>> {
        self.params
            .iter()
            .map(|p| {
                let t = p.tensor.cast::<T>();
                if track {
                    Var::leaf(t)
                } else {
                    Var::constant(t)
                }
            })
            .collect()
    }

    /// Adds the gradients of `bound` leaves into each parameter's grad slot.
    pub fn accumulate(&mut self, bound: &[Var<f32>], grads: &super::Gradients<f32>) {
        for (p, v) in self.params.iter_mut().zip(bound) {
            if let Some(g) = grads.get(v) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}
