use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::Tensor;

/// Scalar type a [`Tensor`] can hold. Training runs in `f32`; gradient
/// checks switch to `f64`.
pub trait Element:
    Float + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const DTYPE: &'static str;

    /// Converts from `f64`, rounding to the nearest representable value.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn next_up(self) -> Self;

    fn next_down(self) -> Self;

    /// Converts stored (always `f32`) weights into this element type.
    fn from_f32_tensor(t: &Tensor<f32>) -> Tensor<Self>;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn next_up(self) -> Self {
        f32::next_up(self)
    }

    fn next_down(self) -> Self {
        f32::next_down(self)
    }

    fn from_f32_tensor(t: &Tensor<f32>) -> Tensor<f32> {
        t.clone()
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn next_up(self) -> Self {
        f64::next_up(self)
    }

    fn next_down(self) -> Self {
        f64::next_down(self)
    }

    fn from_f32_tensor(t: &Tensor<f32>) -> Tensor<f64> {
        t.cast()
    }
}
