//! Scalar abstraction: the whole numeric stack is generic over `f32`/`f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the tensors, model, and optimizer operate on.
///
/// `f32` is the production type (checkpoints and frame files store 32-bit
/// floats); `f64` instantiations back the high-precision gradient checks.
/// Conversions are named `as_*`/`from_*` to stay clear of the fallible
/// `ToPrimitive` methods that `Float` already drags in.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn as_f64(self) -> f64 {
        self
    }
}
