use super::graph::{slot, Graph, Node, Op, Var};
use crate::error::Result;
use crate::scalar::Scalar;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of `x·Φ(x)`.
pub(crate) fn gelu_scalar<S: Scalar>(x: S) -> S {
    let inner = S::lit(SQRT_2_OVER_PI) * (x + S::lit(GELU_CUBIC) * x * x * x);
    S::lit(0.5) * x * (S::one() + inner.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::lit(SQRT_2_OVER_PI);
    let a = S::lit(GELU_CUBIC);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = S::lit(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

impl<S: Scalar> Graph<S> {
    /// Softmax over the last axis, computed after subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let node = &self.nodes[ix];
        let d = *node.shape.last().expect("rank >= 1");
        let mut out = node.data.clone();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = S::one() / total;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = node.shape.clone();
        self.push("softmax", shape, out, Op::Softmax(ix), &[ix])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let node = &self.nodes[ix];
        let out = node.data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = node.shape.clone();
        self.push("gelu", shape, out, Op::Gelu(ix), &[ix])
    }
}

pub(super) fn softmax_backward<S: Scalar>(
    g: &[S],
    x: usize,
    node: &Node<S>,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    let Some(gx) = slot(grads, nodes, x) else { return };
    let d = *node.shape.last().expect("rank >= 1");
    for ((gx_row, y_row), g_row) in gx
        .chunks_exact_mut(d)
        .zip(node.data.chunks_exact(d))
        .zip(g.chunks_exact(d))
    {
        let dot: S = y_row.iter().zip(g_row).map(|(&y, &gv)| y * gv).sum();
        for ((acc, &y), &gv) in gx_row.iter_mut().zip(y_row).zip(g_row) {
            *acc += y * (gv - dot);
        }
    }
}

pub(super) fn gelu_backward<S: Scalar>(g: &[S], x: usize, nodes: &[Node<S>], grads: &mut [Option<Vec<S>>]) {
    let xd = &nodes[x].data;
    if let Some(gx) = slot(grads, nodes, x) {
        for ((acc, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
            *acc += gv * gelu_derivative(xv);
        }
    }
}
