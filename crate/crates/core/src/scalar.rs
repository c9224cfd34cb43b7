//! Scalar abstraction: the numeric core is generic over f32/f64.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type for tensors and model parameters.
///
/// Working precision defaults to `f64` (see the crate-root aliases);
/// `f32` is used for checkpoint storage and is a valid compute type.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Default + Debug + Display + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into the active scalar type.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 representable in scalar type")
}

/// Converts a scalar back to `f64` for reporting.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("scalar representable as f64")
}
