use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

// Node ids increase monotonically, so a parent always has a smaller id than
// any node built from it. Reverse id order is therefore a topological order.
static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Everything a node's gradient function can see during the backward pass.
pub struct BackwardCtx<'a, T: Scalar> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
    pub inputs: &'a [Var<T>],
    pub output: &'a Tensor<T>,
    /// `needs[i]` is true when `inputs[i]` requires a gradient.
    pub needs: &'a [bool],
}

type GradFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var<T>>,
    grad_fn: Option<GradFn<T>>,
}

/// A tensor recorded in the autograd graph.
///
/// Cloning a `Var` is cheap and yields a handle to the same node.
pub struct Var<T: Scalar = f32>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, inputs: Vec<Var<T>>, grad_fn: Option<GradFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            inputs,
            grad_fn,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(strip(value), false, Vec::new(), None)
    }

    /// A leaf whose gradient is reported by [`backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(strip(value), true, Vec::new(), None)
    }

    /// Records the result of an operation. The gradient function is dropped
    /// when no input requires a gradient.
    pub(crate) fn from_op(
        value: Tensor<T>,
        inputs: Vec<Var<T>>,
        grad_fn: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        if requires_grad {
            Self::make(strip(value), true, inputs, Some(Box::new(grad_fn)))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }
}

fn strip<T: Scalar>(mut value: Tensor<T>) -> Tensor<T> {
    value.grad = None;
    value.requires_grad = false;
    value
}

/// Leaf gradients produced by [`backward`], keyed by node.
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&[T]> {
        self.grads.get(&var.id()).map(Vec::as_slice)
    }

    /// Gradient for `var` as a tensor, zeros when the leaf was unreachable.
    pub fn tensor(&self, var: &Var<T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => Tensor::new(var.shape().to_vec(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(var.shape().to_vec()),
        }
    }
}

/// Back-propagates from a scalar `loss` and returns the gradients of every
/// reachable leaf created with [`Var::leaf`].
pub fn backward<T: Scalar>(loss: &Var<T>) -> Result<Gradients<T>> {
    if !loss.value().is_scalar() {
        return Err(Error::NotScalar(loss.shape().to_vec()));
    }
    let mut out = Gradients {
        grads: HashMap::new(),
    };
    if !loss.requires_grad() {
        return Ok(out);
    }

    let mut nodes: HashMap<u64, Var<T>> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if nodes.contains_key(&v.id()) {
            continue;
        }
        for input in &v.0.inputs {
            if input.requires_grad() && !nodes.contains_key(&input.id()) {
                stack.push(input.clone());
            }
        }
        nodes.insert(v.id(), v);
    }
    let mut order: Vec<u64> = nodes.keys().copied().collect();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
    pending.insert(loss.id(), vec![T::one()]);
    for id in order {
        let node = &nodes[&id];
        let Some(grad_fn) = &node.0.grad_fn else {
            // leaf
            if let Some(g) = pending.remove(&id) {
                out.grads.insert(id, g);
            }
            continue;
        };
        let Some(grad) = pending.remove(&id) else {
            continue;
        };
        let needs: Vec<bool> = node.0.inputs.iter().map(Var::requires_grad).collect();
        let ctx = BackwardCtx {
            grad: &grad,
            inputs: &node.0.inputs,
            output: &node.0.value,
            needs: &needs,
        };
        let input_grads = grad_fn(&ctx);
        debug_assert_eq!(input_grads.len(), node.0.inputs.len());
        for (input, g) in node.0.inputs.iter().zip(input_grads) {
            let Some(g) = g else { continue };
            if !input.requires_grad() {
                continue;
            }
            debug_assert_eq!(g.len(), input.value().numel());
            match pending.get_mut(&input.id()) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => {
                    pending.insert(input.id(), g);
                }
            }
        }
    }
    Ok(out)
}
