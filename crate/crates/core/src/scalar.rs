use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point element type for tensors, encoders and explanations.
///
/// Implemented for `f32` and `f64`. Reductions (dot products, matrix
/// products, sums, means) accumulate in `f64` regardless of the storage type.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + LowerExp
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Widening conversion from the on-disk `f32` representation.
    fn from_f32_exact(x: f32) -> Self;

    fn to_f32_lossy(self) -> f32;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32_exact(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32_exact(x: f32) -> Self {
        x
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

/// Shorthand for converting an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot_wide<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}

#[inline]
pub fn sum_wide<T: Scalar>(a: &[T]) -> f64 {
    a.iter().map(|x| x.to_f64_lossy()).sum()
}

/// Cosine similarity of two plain vectors, `None` when either has zero norm.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let na = dot_wide(a, a).sqrt();
    let nb = dot_wide(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c = dot_wide(a, b) / (na * nb);
    Some(T::from_f64_lossy(c.clamp(-1.0, 1.0)))
}
