use super::graph::{slot, Graph, Node, Op, Var};
use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// The right operand is a single `[K, N]` matrix reused for every batch.
    shared_rhs: bool,
}

impl<S: Scalar> Graph<S> {
    /// Batched product `a[..., M, K] · b[..., K, N]`.
    ///
    /// `b` either carries the same leading batch extents as `a`, or is a plain
    /// `[K, N]` matrix shared across them. No other broadcasting is done.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (an, bn) = (&self.nodes[ia], &self.nodes[ib]);
        let (sa, sb) = (&an.shape, &bn.shape);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {sa:?} has K={k}, {sb:?} has K={kb}"
            )));
        }
        let a_batch = &sa[..sa.len() - 2];
        let b_batch = &sb[..sb.len() - 2];
        let shared_rhs = b_batch.is_empty();
        if !shared_rhs && a_batch != b_batch {
            return Err(Error::Shape(format!(
                "matmul batch dimensions {a_batch:?} and {b_batch:?} are not compatible"
            )));
        }
        let batch: usize = a_batch.iter().product();
        let dims = MatMulDims {
            batch,
            m,
            k,
            n,
            shared_rhs,
        };
        let mut out = vec![S::zero(); batch * m * n];
        for bi in 0..batch {
            let a_blk = &an.data[bi * m * k..(bi + 1) * m * k];
            let b_blk = if shared_rhs {
                &bn.data[..]
            } else {
                &bn.data[bi * k * n..(bi + 1) * k * n]
            };
            gemm_nn(a_blk, b_blk, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let mut shape = a_batch.to_vec();
        shape.extend([m, n]);
        self.push("matmul", shape, out, Op::MatMul { a: ia, b: ib, dims }, &[ia, ib])
    }

    /// `x[..., K] · w[K, N] + b[N]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }
}

pub(super) fn matmul_backward<S: Scalar>(
    g: &[S],
    a: usize,
    b: usize,
    dims: &MatMulDims,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    let MatMulDims {
        batch,
        m,
        k,
        n,
        shared_rhs,
    } = *dims;
    let (ad, bd) = (&nodes[a].data, &nodes[b].data);
    if let Some(ga) = slot(grads, nodes, a) {
        for bi in 0..batch {
            let b_blk = if shared_rhs {
                &bd[..]
            } else {
                &bd[bi * k * n..(bi + 1) * k * n]
            };
            gemm_nt(
                &g[bi * m * n..(bi + 1) * m * n],
                b_blk,
                &mut ga[bi * m * k..(bi + 1) * m * k],
                m,
                n,
                k,
            );
        }
    }
    if let Some(gb) = slot(grads, nodes, b) {
        if shared_rhs {
            // Every batch contributes to the same [K, N] matrix; treat the
            // batch as extra rows of `a`.
            gemm_tn(ad, g, gb, k, batch * m, n);
        } else {
            for bi in 0..batch {
                gemm_tn(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    &mut gb[bi * k * n..(bi + 1) * k * n],
                    k,
                    m,
                    n,
                );
            }
        }
    }
}
