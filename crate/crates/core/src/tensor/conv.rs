//! Grouped 2-D cross-correlation with zero padding, lowered to matrix products
//! through im2col.

use serde::{Deserialize, Serialize};

use super::graph::{slot, Graph, Node, Op, Var};
use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }
}

/// `floor((input + 2·padding − kernel) / stride) + 1`, or `None` when the
/// kernel does not fit the padded input.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn cg(&self) -> usize {
        self.c_in / self.spec.groups
    }
    fn og(&self) -> usize {
        self.c_out / self.spec.groups
    }
    fn ck(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn resolve(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if x.len() != 4 {
            return Err(Error::Shape(format!("conv2d input must be [N,C,H,W], got {x:?}")));
        }
        if w.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d weight must be [C_out,C_in/groups,kH,kW], got {w:?}"
            )));
        }
        let g = spec.groups;
        if g == 0 {
            return Err(Error::InvalidArgument("conv2d groups must be positive".into()));
        }
        if spec.stride.0 == 0 || spec.stride.1 == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (n, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
        let (c_out, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
        if c_in % g != 0 {
            return Err(Error::Shape(format!(
                "conv2d: input channels {c_in} not divisible by groups {g}"
            )));
        }
        if c_out % g != 0 {
            return Err(Error::Shape(format!(
                "conv2d: output channels {c_out} not divisible by groups {g}"
            )));
        }
        if cg != c_in / g {
            return Err(Error::Shape(format!(
                "conv2d: weight channel axis is {cg} but input channels {c_in} / groups {g} = {}",
                c_in / g
            )));
        }
        let ho = conv_output_extent(h, kh, spec.stride.0, spec.padding.0).ok_or_else(|| {
            Error::Shape(format!(
                "conv2d: kernel height {kh} exceeds padded input height {}",
                h + 2 * spec.padding.0
            ))
        })?;
        let wo = conv_output_extent(wd, kw, spec.stride.1, spec.padding.1).ok_or_else(|| {
            Error::Shape(format!(
                "conv2d: kernel width {kw} exceeds padded input width {}",
                wd + 2 * spec.padding.1
            ))
        })?;
        Ok(Self {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            ho,
            wo,
            spec,
        })
    }

    /// Fills `cols[CK, P]` for sample `n`, group `grp`.
    fn im2col<S: Scalar>(&self, x: &[S], n: usize, grp: usize, cols: &mut [S]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let p = self.positions();
        let cg = self.cg();
        for c in 0..cg {
            let chan = n * self.c_in + grp * cg + c;
            let plane = &x[chan * self.h * self.w..(chan + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oh in 0..self.ho {
                        let ih = (oh * sh + i) as isize - ph as isize;
                        let dst = &mut row[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(S::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * sw + j) as isize - pw as isize;
                            *d = if iw < 0 || iw >= self.w as isize {
                                S::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols[CK, P]` back into `dx` for sample `n`, group `grp`.
    fn col2im<S: Scalar>(&self, cols: &[S], n: usize, grp: usize, dx: &mut [S]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let p = self.positions();
        let cg = self.cg();
        for c in 0..cg {
            let chan = n * self.c_in + grp * cg + c;
            let plane = &mut dx[chan * self.h * self.w..(chan + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oh in 0..self.ho {
                        let ih = (oh * sh + i) as isize - ph as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * sw + j) as isize - pw as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += row[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    /// `input[N,C_in,H,W]` ⋆ `weight[C_out,C_in/groups,kH,kW]` (+ `bias[C_out]`).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (ix, iw) = (self.check(input)?, self.check(weight)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let geo = Geometry::resolve(&self.nodes[ix].shape, &self.nodes[iw].shape, spec)?;
        if let Some(ib) = ib {
            if self.nodes[ib].shape != [geo.c_out] {
                return Err(Error::Shape(format!(
                    "conv2d: bias shape {:?} does not match {} output channels",
                    self.nodes[ib].shape, geo.c_out
                )));
            }
        }
        let (x, w) = (&self.nodes[ix].data, &self.nodes[iw].data);
        let p = geo.positions();
        let (ck, og) = (geo.ck(), geo.og());
        let mut out = vec![S::zero(); geo.n * geo.c_out * p];
        let mut cols = vec![S::zero(); ck * p];
        for n in 0..geo.n {
            for grp in 0..spec.groups {
                geo.im2col(x, n, grp, &mut cols);
                let o0 = (n * geo.c_out + grp * og) * p;
                gemm_nn(&w[grp * og * ck..(grp + 1) * og * ck], &cols, &mut out[o0..o0 + og * p], og, ck, p);
            }
        }
        if let Some(ib) = ib {
            let b = &self.nodes[ib].data;
            for (i, plane) in out.chunks_exact_mut(p).enumerate() {
                let bv = b[i % geo.c_out];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut parents = vec![ix, iw];
        parents.extend(ib);
        self.push(
            "conv2d",
            vec![geo.n, geo.c_out, geo.ho, geo.wo],
            out,
            Op::Conv2d {
                input: ix,
                weight: iw,
                bias: ib,
                spec,
            },
            &parents,
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<S: Scalar>(
    g: &[S],
    input: usize,
    weight: usize,
    bias: Option<usize>,
    spec: &Conv2dSpec,
    _node: &Node<S>,
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    let geo = Geometry::resolve(&nodes[input].shape, &nodes[weight].shape, *spec)
        .expect("geometry validated in forward");
    let p = geo.positions();
    let (ck, og) = (geo.ck(), geo.og());
    let (x, w) = (&nodes[input].data, &nodes[weight].data);

    if let Some(b) = bias {
        if let Some(gb) = slot(grads, nodes, b) {
            for (i, plane) in g.chunks_exact(p).enumerate() {
                gb[i % geo.c_out] += plane.iter().copied().sum::<S>();
            }
        }
    }
    let mut cols = vec![S::zero(); ck * p];
    if let Some(gw) = slot(grads, nodes, weight) {
        for n in 0..geo.n {
            for grp in 0..spec.groups {
                geo.im2col(x, n, grp, &mut cols);
                let o0 = (n * geo.c_out + grp * og) * p;
                gemm_nt(&g[o0..o0 + og * p], &cols, &mut gw[grp * og * ck..(grp + 1) * og * ck], og, p, ck);
            }
        }
    }
    if let Some(gx) = slot(grads, nodes, input) {
        for n in 0..geo.n {
            for grp in 0..spec.groups {
                cols.fill(S::zero());
                let o0 = (n * geo.c_out + grp * og) * p;
                gemm_tn(&w[grp * og * ck..(grp + 1) * og * ck], &g[o0..o0 + og * p], &mut cols, ck, og, p);
                geo.col2im(&cols, n, grp, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Direct seven-loop definition, independent of im2col.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, spec: Conv2dSpec) -> Vec<f64> {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let ho = conv_output_extent(h, kh, spec.stride.0, spec.padding.0).unwrap();
        let wo = conv_output_extent(wd, kw, spec.stride.1, spec.padding.1).unwrap();
        let og = co / spec.groups;
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                let grp = o / og;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cg {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ih = (oh * spec.stride.0 + i) as isize - spec.padding.0 as isize;
                                    let iw = (ow * spec.stride.1 + j) as isize - spec.padding.1 as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        s += x.at(&[b, grp * cg + ci, ih as usize, iw as usize])
                                            * w.at(&[o, ci, i, j]);
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * ho + oh) * wo + ow] = s;
                    }
                }
            }
        }
        let _ = c;
        out
    }

    #[test]
    fn ones_kernel_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::ones(vec![1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(vec![1, 1, 2, 2]));
        let y = g.conv2d(x, w, None, Conv2dSpec::new(1, 0, 1)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y), &[4.0; 4]);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..32).map(|i| i as f64 * 0.25 - 3.0).collect();
        let x = g.constant(Tensor::new(vec![1, 2, 4, 4], data.clone()).unwrap());
        let w = g.constant(Tensor::ones(vec![2, 1, 1, 1]));
        let y = g.conv2d(x, w, None, Conv2dSpec::new(1, 0, 2)).unwrap();
        assert_eq!(g.value(y), &data[..]);
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(32, 3, 2, 1), Some(16));
        assert_eq!(conv_output_extent(34, 3, 2, 1), Some(17));
        assert_eq!(conv_output_extent(34, 7, 4, 2), Some(8));
        assert_eq!(conv_output_extent(2, 7, 1, 2), None);
    }

    #[test]
    fn matches_naive_definition() {
        let cases = [
            (vec![2, 4, 5, 6], vec![6, 2, 3, 2], Conv2dSpec { stride: (2, 1), padding: (1, 0), groups: 2 }),
            (vec![1, 3, 7, 7], vec![4, 3, 3, 3], Conv2dSpec::new(2, 1, 1)),
            (vec![2, 3, 6, 5], vec![3, 1, 3, 3], Conv2dSpec::new(1, 1, 3)),
        ];
        for (xs, ws, spec) in cases {
            let xt = Tensor::new(xs.clone(), (0..xs.iter().product::<usize>()).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
            let wt = Tensor::new(ws.clone(), (0..ws.iter().product::<usize>()).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
            let want = naive(&xt, &wt, spec);
            let mut g = Graph::new();
            let (x, w) = (g.constant(xt), g.constant(wt));
            let y = g.conv2d(x, w, None, spec).unwrap();
            for (a, b) in g.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_and_kernel_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![4, 1, 3, 3]));
        let msg = g.conv2d(x, w, None, Conv2dSpec::new(1, 0, 2)).unwrap_err().to_string();
        assert!(msg.contains("not divisible"), "{msg}");
        let big = g.constant(Tensor::zeros(vec![1, 3, 7, 7]));
        let msg = g.conv2d(x, big, None, Conv2dSpec::new(1, 1, 1)).unwrap_err().to_string();
        assert!(msg.contains("kernel height"), "{msg}");
        let wrong_c = g.constant(Tensor::zeros(vec![2, 2, 1, 1]));
        let msg = g.conv2d(x, wrong_c, None, Conv2dSpec::new(1, 0, 1)).unwrap_err().to_string();
        assert!(msg.contains("weight channel axis"), "{msg}");
    }
}
