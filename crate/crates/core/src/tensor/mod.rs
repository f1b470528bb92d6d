//! Dense row-major arrays with a small reverse-mode autodiff engine.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles; calling
//! [`Graph::backward`] on a scalar output populates gradients on the leaves
//! that were created with `requires_grad`.

mod activation;
mod conv;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod linalg;
mod norm;
mod ops;

pub use conv::{conv_output_extent, Conv2dSpec};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, InputCheck};
pub use graph::{Graph, Var};
pub use norm::{channel_moments, DEFAULT_NORM_EPS};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor construction (element {pos} of shape {shape:?})"
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, S::one())
    }

    /// Panics on a zero extent; use [`Tensor::new`] for unchecked shapes.
    pub fn full(shape: Vec<usize>, value: S) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let n = numel(&shape);
        check_shape(&shape, n).expect("invalid shape");
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable element access. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; it must match the data length.
    pub fn set_grad(&mut self, grad: Option<Vec<S>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::Shape(format!(
                    "gradient length {} does not match tensor of shape {:?}",
                    g.len(),
                    self.shape
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        let grad = self.grad;
        Ok(Self {
            shape,
            data: self.data,
            requires_grad: self.requires_grad,
            grad,
        })
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Element-wise precision conversion.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| T::lit(v.as_f64())).collect()),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<S>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for (i, t) in items.iter().enumerate() {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack item {i} has shape {:?}, expected {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts_unchecked(shape, data))
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape("rank-0 shapes are not supported; use [1]".into()));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(Error::Shape(format!(
            "axis {axis} of shape {shape:?} has zero extent"
        )));
    }
    if numel(shape) != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {} elements but {len} were supplied",
            numel(shape)
        )));
    }
    Ok(())
}
