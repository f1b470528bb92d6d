//! Element-wise arithmetic, layout ops and reductions.

use super::graph::{slot, Graph, Node, Op, Var};
use super::numel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<S: Scalar> Graph<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let ia = self.check(a)?;
        let node = &self.nodes[ia];
        let data = node.data.iter().map(|&x| x * c).collect();
        let shape = node.shape.clone();
        self.push("scale", shape, data, Op::Scale(ia, c), &[ia])
    }

    /// Adds a `[D]` bias to every last-axis slice of `x[..., D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (xn, bn) = (&self.nodes[ix], &self.nodes[ib]);
        let d = *xn.shape.last().expect("rank >= 1");
        if bn.shape != [d] {
            return Err(Error::Shape(format!(
                "add_bias: bias shape {:?} does not match last axis {d} of {:?}",
                bn.shape, xn.shape
            )));
        }
        let mut data = xn.data.clone();
        for row in data.chunks_exact_mut(d) {
            row.iter_mut().zip(&bn.data).for_each(|(v, &b)| *v += b);
        }
        let shape = xn.shape.clone();
        self.push("add_bias", shape, data, Op::AddBias { x: ix, bias: ib }, &[ix, ib])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.check(a)?;
        let node = &self.nodes[ia];
        if numel(&shape) != node.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {shape:?}",
                node.shape
            )));
        }
        let data = node.data.clone();
        self.push("reshape", shape, data, Op::Reshape(ia), &[ia])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let node = &self.nodes[ia];
        let rank = node.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::Shape(format!(
                "permute: {axes:?} is not a permutation of the {rank} axes of {:?}",
                node.shape
            )));
        }
        let (shape, data) = permute_data(&node.data, &node.shape, axes);
        self.push(
            "permute",
            shape,
            data,
            Op::Permute {
                input: ia,
                axes: axes.to_vec(),
            },
            &[ia],
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let first = idx
            .first()
            .map(|&i| self.nodes[i].shape.clone())
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &i in &idx {
            let s = &self.nodes[i].shape;
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along axis {axis}: shape {s:?} incompatible with {first:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let len = self.nodes[i].shape[axis] * inner;
                data.extend_from_slice(&self.nodes[i].data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", shape, data, Op::Concat { inputs: idx.clone(), axis }, &idx)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let node = &self.nodes[ia];
        if axis >= node.shape.len() || len == 0 || start + len > node.shape[axis] {
            return Err(Error::Shape(format!(
                "narrow: range {start}..{} on axis {axis} out of bounds for {:?}",
                start + len,
                node.shape
            )));
        }
        let outer: usize = node.shape[..axis].iter().product();
        let inner: usize = node.shape[axis + 1..].iter().product();
        let ext = node.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&node.data[base..base + len * inner]);
        }
        let mut shape = node.shape.clone();
        shape[axis] = len;
        self.push("narrow", shape, data, Op::Narrow { input: ia, axis, start }, &[ia])
    }

    /// Repeats a `[1, ...]` tensor `n` times along the leading axis.
    pub fn broadcast_batch(&mut self, a: Var, n: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let node = &self.nodes[ia];
        if node.shape[0] != 1 || n == 0 {
            return Err(Error::Shape(format!(
                "broadcast_batch: leading extent of {:?} must be 1 and n > 0",
                node.shape
            )));
        }
        let data = node.data.repeat(n);
        let mut shape = node.shape.clone();
        shape[0] = n;
        self.push("broadcast_batch", shape, data, Op::BroadcastBatch(ia), &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: S = self.nodes[ia].data.iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(ia), &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let node = &self.nodes[ia];
        let s: S = node.data.iter().copied().sum();
        let m = s / S::lit(node.data.len() as f64);
        self.push("mean", vec![1], vec![m], Op::Mean(ia), &[ia])
    }

    /// Mean of squared differences. Gradient flows into `pred` (and into
    /// `target` if it is tracked).
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ip, it) = (self.check(pred)?, self.check(target)?);
        let (pn, tn) = (&self.nodes[ip], &self.nodes[it]);
        if pn.shape != tn.shape {
            return Err(Error::Shape(format!(
                "mse_loss: prediction shape {:?} does not match target shape {:?}",
                pn.shape, tn.shape
            )));
        }
        let sse: S = pn
            .data
            .iter()
            .zip(&tn.data)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let mse = sse / S::lit(pn.data.len() as f64);
        self.push(
            "mse_loss",
            vec![1],
            vec![mse],
            Op::MseLoss {
                pred: ip,
                target: it,
            },
            &[ip, it],
        )
    }

    fn zip_same(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: fn(usize, usize) -> Op<S>,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (an, bn) = (&self.nodes[ia], &self.nodes[ib]);
        if an.shape != bn.shape {
            return Err(Error::Shape(format!(
                "{name}: operand shapes {:?} and {:?} differ",
                an.shape, bn.shape
            )));
        }
        let data = an.data.iter().zip(&bn.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = an.shape.clone();
        self.push(name, shape, data, op(ia, ib), &[ia, ib])
    }
}

pub(super) fn permute_data<S: Copy>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<S>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Stride in the input for a unit step along each output axis.
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let inner_ext = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    loop {
        let mut o = offset;
        for _ in 0..inner_ext {
            out.push(data[o]);
            o += inner_step;
        }
        // Advance the counter over all but the innermost output axis.
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            counter[ax] += 1;
            offset += step[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

pub(super) fn add_backward<S: Scalar>(
    g: &[S],
    a: usize,
    b: usize,
    b_sign: S,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    if let Some(ga) = slot(grads, nodes, a) {
        ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
    }
    if let Some(gb) = slot(grads, nodes, b) {
        gb.iter_mut().zip(g).for_each(|(d, &v)| *d += b_sign * v);
    }
}

pub(super) fn mul_backward<S: Scalar>(
    g: &[S],
    a: usize,
    b: usize,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    if let Some(ga) = slot(grads, nodes, a) {
        for ((d, &v), &y) in ga.iter_mut().zip(g).zip(&nodes[b].data) {
            *d += v * y;
        }
    }
    if let Some(gb) = slot(grads, nodes, b) {
        for ((d, &v), &x) in gb.iter_mut().zip(g).zip(&nodes[a].data) {
            *d += v * x;
        }
    }
}

pub(super) fn scale_backward<S: Scalar>(
    g: &[S],
    a: usize,
    c: S,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    if let Some(ga) = slot(grads, nodes, a) {
        ga.iter_mut().zip(g).for_each(|(d, &v)| *d += c * v);
    }
}

pub(super) fn add_bias_backward<S: Scalar>(
    g: &[S],
    x: usize,
    bias: usize,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    if let Some(gx) = slot(grads, nodes, x) {
        gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
    }
    if let Some(gb) = slot(grads, nodes, bias) {
        let d = gb.len();
        for row in g.chunks_exact(d) {
            gb.iter_mut().zip(row).for_each(|(acc, &v)| *acc += v);
        }
    }
}

pub(super) fn reshape_backward<S: Scalar>(
    g: &[S],
    a: usize,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    if let Some(ga) = slot(grads, nodes, a) {
        ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
    }
}

pub(super) fn permute_backward<S: Scalar>(
    g: &[S],
    input: usize,
    axes: &[usize],
    node: &Node<S>,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    if let Some(gi) = slot(grads, nodes, input) {
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let (_, back) = permute_data(g, &node.shape, &inverse);
        gi.iter_mut().zip(back).for_each(|(d, v)| *d += v);
    }
}

pub(super) fn concat_backward<S: Scalar>(
    g: &[S],
    inputs: &[usize],
    axis: usize,
    node: &Node<S>,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    let outer: usize = node.shape[..axis].iter().product();
    let inner: usize = node.shape[axis + 1..].iter().product();
    let row = node.shape[axis] * inner;
    let mut offset = 0;
    for &i in inputs {
        let len = nodes[i].shape[axis] * inner;
        if let Some(gi) = slot(grads, nodes, i) {
            for o in 0..outer {
                let src = &g[o * row + offset..o * row + offset + len];
                gi[o * len..(o + 1) * len]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, &v)| *d += v);
            }
        }
        offset += len;
    }
}

pub(super) fn narrow_backward<S: Scalar>(
    g: &[S],
    input: usize,
    axis: usize,
    start: usize,
    node: &Node<S>,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    let in_shape = &nodes[input].shape;
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let ext = in_shape[axis];
    let len = node.shape[axis];
    if let Some(gi) = slot(grads, nodes, input) {
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            let src = &g[o * len * inner..(o + 1) * len * inner];
            gi[base..base + len * inner]
                .iter_mut()
                .zip(src)
                .for_each(|(d, &v)| *d += v);
        }
    }
}

pub(super) fn broadcast_batch_backward<S: Scalar>(
    g: &[S],
    a: usize,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    if let Some(ga) = slot(grads, nodes, a) {
        let len = ga.len();
        for chunk in g.chunks_exact(len) {
            ga.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
        }
    }
}

pub(super) fn sum_backward<S: Scalar>(
    g: &[S],
    a: usize,
    factor: S,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    if let Some(ga) = slot(grads, nodes, a) {
        let v = g[0] * factor;
        ga.iter_mut().for_each(|d| *d += v);
    }
}

pub(super) fn mse_backward<S: Scalar>(
    g: &[S],
    pred: usize,
    target: usize,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    let n = nodes[pred].data.len();
    let coef = g[0] * S::lit(2.0) / S::lit(n as f64);
    let (p, t) = (&nodes[pred].data, &nodes[target].data);
    if let Some(gp) = slot(grads, nodes, pred) {
        for ((d, &pv), &tv) in gp.iter_mut().zip(p).zip(t) {
            *d += coef * (pv - tv);
        }
    }
    if let Some(gt) = slot(grads, nodes, target) {
        for ((d, &pv), &tv) in gt.iter_mut().zip(p).zip(t) {
            *d -= coef * (pv - tv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<usize> = (0..24).collect();
        let (out_shape, out) = permute_data(&data, &shape, &[2, 0, 1]);
        assert_eq!(out_shape, vec![4, 2, 3]);
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..3 {
                    assert_eq!(out[(i * 2 + j) * 3 + k], (j * 3 + k) * 4 + i);
                }
            }
        }
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2, 2], (5..13).map(f64::from).collect()).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(
            g.value(c),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let back = g.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }

    #[test]
    fn mse_hand_example() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
        let t = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let l = g.mse_loss(p, t).unwrap();
        assert_eq!(g.value(l), &[5.0]);
        g.backward(l).unwrap();
        // 2 (pred - target) / N
        assert_eq!(g.grad(p).unwrap(), &[-1.0, -3.0]);

        let same = g.mse_loss(t, t).unwrap();
        assert_eq!(g.value(same), &[0.0]);
        let wrong = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert!(g.mse_loss(wrong, t).is_err());
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![3, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(g.permute(a, &[0, 0]).is_err());
        assert!(g.narrow(a, 1, 2, 2).is_err());
    }
}
