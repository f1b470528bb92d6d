//! Floating-point element type shared by tensors, models and optimizers.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point: f32 or f64.
///
/// Correctness tests and finite-difference checks run at `f64`; training may
/// run at `f32`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Short type name used in manifests and diagnostics.
    const NAME: &'static str;

    /// Converts an `f64` literal or statistic into this type (rounding for `f32`).
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
