use std::sync::atomic::{AtomicU64, Ordering};

use super::{activation, conv, linalg, norm, ops, Conv2dSpec, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

pub(super) struct Node<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub op: Op<S>,
    pub requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across backward passes.
    pub grad: Option<Vec<S>>,
}

pub(super) enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddBias {
        x: usize,
        bias: usize,
    },
    Reshape(usize),
    Permute {
        input: usize,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    BroadcastBatch(usize),
    MatMul {
        a: usize,
        b: usize,
        dims: linalg::MatMulDims,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        spec: Conv2dSpec,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: Option<usize>,
        stats: norm::NormStats<S>,
    },
    Softmax(usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    MseLoss {
        pred: usize,
        target: usize,
    },
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// index order is a topological order.
pub struct Graph<S: Scalar> {
    id: u64,
    pub(super) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Records a tensor as a leaf. Its `requires_grad` flag decides whether
    /// gradients flow into it.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let requires_grad = tensor.requires_grad();
        let grad = tensor.grad().map(<[S]>::to_vec);
        let shape = tensor.shape().to_vec();
        let data = tensor.into_data();
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        self.var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.check(v).expect("foreign var")].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[self.check(v).expect("foreign var")].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v).expect("foreign var")].requires_grad
    }

    /// Copies the value (and any accumulated gradient) out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let node = &self.nodes[self.check(v).expect("foreign var")];
        let mut t = Tensor::from_parts_unchecked(node.shape.clone(), node.data.clone())
            .with_requires_grad(node.requires_grad);
        t.set_grad(node.grad.clone()).expect("grad shape");
        t
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[self.check(v).expect("foreign var")].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        let i = self.check(v).expect("foreign var");
        self.nodes[i].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Back-propagates from a scalar output. Leaf gradients accumulate across
    /// calls; intermediate gradients are rebuilt on every pass.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = self.check(output)?;
        let out_node = &self.nodes[out];
        if out_node.data.len() != 1 {
            return Err(Error::NonScalarOutput(out_node.shape.clone()));
        }
        if !out_node.requires_grad {
            return Err(Error::Detached);
        }

        let mut grads: Vec<Option<Vec<S>>> = (0..=out).map(|_| None).collect();
        grads[out] = Some(vec![S::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
            } else {
                backprop(node, &g, &self.nodes, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    pub(super) fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn var(&self, index: usize) -> Var {
        Var {
            graph: self.id,
            index,
        }
    }

    pub(super) fn node(&self, v: Var) -> Result<&Node<S>> {
        Ok(&self.nodes[self.check(v)?])
    }

    /// Appends an op result. Rejects non-finite outputs, naming the op.
    pub(super) fn push(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<S>,
        op: Op<S>,
        parents: &[usize],
    ) -> Result<Var> {
        debug_assert_eq!(super::numel(&shape), data.len());
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{name} (element {pos} of output shape {shape:?})"
            )));
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Ok(self.var(self.nodes.len() - 1))
    }
}

/// Zero-initialized gradient buffer for `idx`, or `None` when nothing upstream
/// of it needs a gradient.
pub(super) fn slot<'g, S: Scalar>(
    grads: &'g mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    idx: usize,
) -> Option<&'g mut [S]> {
    if !nodes[idx].requires_grad {
        return None;
    }
    Some(grads[idx].get_or_insert_with(|| vec![S::zero(); nodes[idx].data.len()]))
}

fn backprop<S: Scalar>(
    node: &Node<S>,
    g: &[S],
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    match &node.op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::Add(a, b) => ops::add_backward(g, *a, *b, S::one(), nodes, grads),
        Op::Sub(a, b) => ops::add_backward(g, *a, *b, -S::one(), nodes, grads),
        Op::Mul(a, b) => ops::mul_backward(g, *a, *b, nodes, grads),
        Op::Scale(a, c) => ops::scale_backward(g, *a, *c, nodes, grads),
        Op::AddBias { x, bias } => ops::add_bias_backward(g, *x, *bias, nodes, grads),
        Op::Reshape(a) => ops::reshape_backward(g, *a, nodes, grads),
        Op::Permute { input, axes } => ops::permute_backward(g, *input, axes, node, nodes, grads),
        Op::Concat { inputs, axis } => ops::concat_backward(g, inputs, *axis, node, nodes, grads),
        Op::Narrow { input, axis, start } => {
            ops::narrow_backward(g, *input, *axis, *start, node, nodes, grads)
        }
        Op::BroadcastBatch(a) => ops::broadcast_batch_backward(g, *a, nodes, grads),
        Op::MatMul { a, b, dims } => linalg::matmul_backward(g, *a, *b, dims, nodes, grads),
        Op::Conv2d {
            input,
            weight,
            bias,
            spec,
        } => conv::conv2d_backward(g, *input, *weight, *bias, spec, node, nodes, grads),
        Op::Norm {
            x,
            gamma,
            beta,
            stats,
        } => norm::norm_backward(g, *x, *gamma, *beta, stats, nodes, grads),
        Op::Softmax(a) => activation::softmax_backward(g, *a, node, nodes, grads),
        Op::Gelu(a) => activation::gelu_backward(g, *a, nodes, grads),
        Op::Sum(a) => ops::sum_backward(g, *a, S::one(), nodes, grads),
        Op::Mean(a) => {
            let n = S::lit(nodes[*a].data.len() as f64);
            ops::sum_backward(g, *a, S::one() / n, nodes, grads)
        }
        Op::MseLoss { pred, target } => ops::mse_backward(g, *pred, *target, nodes, grads),
    }
}
