//! Scalar abstraction: every numeric kernel is generic over `f32`/`f64`.
//!
//! Tensors store `f32` in production (and in checkpoints, which are always
//! 32-bit on disk); gradient checks and the linear-algebra oracles run the
//! same code at `f64`. Reductions and matrix products accumulate in 64-bit
//! regardless of the storage type.

use std::fmt::{Debug, Display};

/// Floating-point element type of a [`crate::tensor::Tensor`].
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}
