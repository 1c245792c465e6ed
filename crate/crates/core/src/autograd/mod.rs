//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes
//! are appended in evaluation order, so the tape is a topological order
//! by construction and `backward` walks it once in reverse.

pub(crate) mod conv;
mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheck, GradReport};
pub use ops::softmax_channels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        target: Vec<u8>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    BilinearSample {
        x: Var,
        positions: Var,
    },
    DeformConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        offsets: Var,
        pad: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::Relu(_) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Concat(_) => "concat_channels",
            Op::Softmax(_) => "softmax_channels",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::DeformConv2d { .. } => "deformable_conv2d",
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    /// Accumulated gradient; present only on leaves that require it.
    pub grad: Option<Vec<T>>,
}

/// Tape of recorded operations for one forward pass.
///
/// A graph is confined to the thread that builds it.
#[derive(Debug, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![T::zero(); value.numel()]);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v` (`"leaf"` for inputs).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Accumulated gradient of a leaf, `None` unless it requires grad.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape(), g.clone()).expect("grad matches shape"))
    }

    /// Reset every leaf gradient to zero.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(T::zero());
            }
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagate `d loss / d leaf` into every leaf that requires grad.
    ///
    /// Leaf gradients are added to, never overwritten, so repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {shape}"),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                if let Some(acc) = self.nodes[id].grad.as_mut() {
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a += *d;
                    }
                }
                continue;
            }
            ops::backward_node(&self.nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

/// Take the gradient buffer of `v` out of the table, zeroed if absent.
///
/// `None` when `v` does not require grad. Return it with [`put_slot`];
/// taking the same node twice yields two buffers that are summed on
/// return, so aliased inputs like `mul(x, x)` work.
pub(crate) fn take_slot<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
) -> Option<Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]))
}

pub(crate) fn put_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
    let Some(buf) = buf else {
        return;
    };
    match grads[v.0].as_mut() {
        None => grads[v.0] = Some(buf),
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&buf) {
                *a += *b;
            }
        }
    }
}
