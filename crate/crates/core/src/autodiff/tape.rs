//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so index order is a topological
//! order and backpropagation is a single reverse sweep.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward<T: Scalar> {
    /// One entry per parent; `None` where `tracked[i]` is false.
    fn backward(
        &self,
        parents: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        tracked: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    tracked: bool,
}

/// Autodiff graph. One tape per forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), op: None, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 5] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, parents: &[Var], op: Box<dyn Backward<T>>) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        let (parents, op) = if tracked {
            (parents.iter().map(|p| p.0).collect(), Some(op))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node { value, parents, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a one-element `loss`, returning gradients of every
    /// tracked leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let parents: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let tracked: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].tracked).collect();
            let pgrads = op.backward(&parents, &node.value, &grad, &tracked);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(pgrads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` was unreachable.
    pub fn take_or_zeros(&mut self, v: Var, shape: [usize; 5]) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(shape))
    }
}
