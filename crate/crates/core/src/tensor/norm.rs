//! Layer and batch normalization over the last axis of `x[..., D]`.
//!
//! Layer norm standardizes each row of `D` features; batch norm standardizes
//! each of the `D` channels across all rows.

use super::graph::{slot, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum NormAxis {
    /// One mean/variance per row (layer norm).
    Rows,
    /// One mean/variance per channel, shared by all rows (batch norm).
    Columns,
}

pub(super) struct NormStats<S> {
    axis: NormAxis,
    mean: Vec<S>,
    rstd: Vec<S>,
    /// Whether the statistics were computed from `x` itself (and so carry
    /// gradient) or supplied as constants.
    from_input: bool,
}

/// Per-channel mean and population variance of `data[rows, d]`.
pub fn channel_moments<S: Scalar>(data: &[S], d: usize) -> (Vec<S>, Vec<S>) {
    let rows = data.len() / d;
    let inv = S::one() / S::lit(rows as f64);
    let mut mean = vec![S::zero(); d];
    for row in data.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![S::zero(); d];
    for row in data.chunks_exact(d) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s *= inv);
    (mean, var)
}

fn row_moments<S: Scalar>(row: &[S]) -> (S, S) {
    let inv = S::one() / S::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() * inv;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv;
    (mean, var)
}

impl<S: Scalar> Graph<S> {
    /// `(x − mean) / sqrt(var + eps) · gamma + beta` per last-axis row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Option<Var>, eps: S) -> Result<Var> {
        let d = self.norm_width("layer_norm", x, gamma, beta, eps)?;
        let data = &self.node(x)?.data;
        let rows = data.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for row in data.chunks_exact(d) {
            let (m, v) = row_moments(row);
            mean.push(m);
            rstd.push(S::one() / (v + eps).sqrt());
        }
        let stats = NormStats {
            axis: NormAxis::Rows,
            mean,
            rstd,
            from_input: true,
        };
        self.apply_norm("layer_norm", x, gamma, beta, stats)
    }

    /// Batch normalization with statistics taken from `x` (training mode).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Option<Var>, eps: S) -> Result<Var> {
        let d = self.norm_width("batch_norm", x, gamma, beta, eps)?;
        let (mean, var) = channel_moments(&self.node(x)?.data, d);
        let rstd = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let stats = NormStats {
            axis: NormAxis::Columns,
            mean,
            rstd,
            from_input: true,
        };
        self.apply_norm("batch_norm", x, gamma, beta, stats)
    }

    /// Batch normalization with externally supplied (running) statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        mean: &[S],
        var: &[S],
        eps: S,
    ) -> Result<Var> {
        let d = self.norm_width("batch_norm", x, gamma, beta, eps)?;
        if mean.len() != d || var.len() != d {
            return Err(Error::Shape(format!(
                "batch_norm: running statistics have {} / {} entries, expected {d}",
                mean.len(),
                var.len()
            )));
        }
        let stats = NormStats {
            axis: NormAxis::Columns,
            mean: mean.to_vec(),
            rstd: var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect(),
            from_input: false,
        };
        self.apply_norm("batch_norm", x, gamma, beta, stats)
    }

    fn norm_width(&self, name: &str, x: Var, gamma: Var, beta: Option<Var>, eps: S) -> Result<usize> {
        if !(eps > S::zero()) {
            return Err(Error::InvalidArgument(format!("{name}: eps must be positive")));
        }
        let shape = &self.node(x)?.shape;
        let d = *shape.last().expect("rank >= 1");
        let gshape = &self.node(gamma)?.shape;
        if gshape.as_slice() != [d] {
            return Err(Error::Shape(format!(
                "{name}: gamma shape {gshape:?} does not match last axis {d} of {shape:?}"
            )));
        }
        if let Some(b) = beta {
            let bshape = &self.node(b)?.shape;
            if bshape.as_slice() != [d] {
                return Err(Error::Shape(format!(
                    "{name}: beta shape {bshape:?} does not match last axis {d} of {shape:?}"
                )));
            }
        }
        Ok(d)
    }

    fn apply_norm(&mut self, name: &str, x: Var, gamma: Var, beta: Option<Var>, stats: NormStats<S>) -> Result<Var> {
        let ix = self.check(x)?;
        let ig = self.check(gamma)?;
        let ib = beta.map(|b| self.check(b)).transpose()?;
        let xn = &self.nodes[ix];
        let d = *xn.shape.last().expect("rank >= 1");
        let gam = &self.nodes[ig].data;
        let bet = ib.map(|b| &self.nodes[b].data);
        let mut out = Vec::with_capacity(xn.data.len());
        for (r, row) in xn.data.chunks_exact(d).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let (m, s) = match stats.axis {
                    NormAxis::Rows => (stats.mean[r], stats.rstd[r]),
                    NormAxis::Columns => (stats.mean[c], stats.rstd[c]),
                };
                let mut y = (v - m) * s * gam[c];
                if let Some(b) = bet {
                    y += b[c];
                }
                out.push(y);
            }
        }
        let shape = xn.shape.clone();
        let mut parents = vec![ix, ig];
        parents.extend(ib);
        self.push(
            name,
            shape,
            out,
            Op::Norm {
                x: ix,
                gamma: ig,
                beta: ib,
                stats,
            },
            &parents,
        )
    }
}

pub(super) fn norm_backward<S: Scalar>(
    g: &[S],
    x: usize,
    gamma: usize,
    beta: Option<usize>,
    stats: &NormStats<S>,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    let xd = &nodes[x].data;
    let gam = &nodes[gamma].data;
    let d = gam.len();
    let rows = xd.len() / d;
    let xhat = |r: usize, c: usize| {
        let (m, s) = match stats.axis {
            NormAxis::Rows => (stats.mean[r], stats.rstd[r]),
            NormAxis::Columns => (stats.mean[c], stats.rstd[c]),
        };
        (xd[r * d + c] - m) * s
    };

    if let Some(gg) = slot(grads, nodes, gamma) {
        for r in 0..rows {
            for c in 0..d {
                gg[c] += g[r * d + c] * xhat(r, c);
            }
        }
    }
    if let Some(b) = beta {
        if let Some(gb) = slot(grads, nodes, b) {
            for row in g.chunks_exact(d) {
                gb.iter_mut().zip(row).for_each(|(acc, &v)| *acc += v);
            }
        }
    }
    let Some(gx) = slot(grads, nodes, x) else { return };
    match (stats.axis, stats.from_input) {
        (NormAxis::Columns, false) => {
            for r in 0..rows {
                for c in 0..d {
                    gx[r * d + c] += g[r * d + c] * gam[c] * stats.rstd[c];
                }
            }
        }
        (NormAxis::Rows, _) => {
            let inv_d = S::one() / S::lit(d as f64);
            for r in 0..rows {
                let mut sum_dxh = S::zero();
                let mut sum_dxh_xh = S::zero();
                for c in 0..d {
                    let dxh = g[r * d + c] * gam[c];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat(r, c);
                }
                let (m1, m2) = (sum_dxh * inv_d, sum_dxh_xh * inv_d);
                let s = stats.rstd[r];
                for c in 0..d {
                    let dxh = g[r * d + c] * gam[c];
                    gx[r * d + c] += s * (dxh - m1 - xhat(r, c) * m2);
                }
            }
        }
        (NormAxis::Columns, true) => {
            let inv_n = S::one() / S::lit(rows as f64);
            let mut sum_dxh = vec![S::zero(); d];
            let mut sum_dxh_xh = vec![S::zero(); d];
            for r in 0..rows {
                for c in 0..d {
                    let dxh = g[r * d + c] * gam[c];
                    sum_dxh[c] += dxh;
                    sum_dxh_xh[c] += dxh * xhat(r, c);
                }
            }
            for r in 0..rows {
                for c in 0..d {
                    let dxh = g[r * d + c] * gam[c];
                    gx[r * d + c] +=
                        stats.rstd[c] * (dxh - sum_dxh[c] * inv_n - xhat(r, c) * sum_dxh_xh[c] * inv_n);
                }
            }
        }
    }
}
