//! Numeric abstraction shared by every math module.
//!
//! The model, metrics and projection code are written once against
//! [`Scalar`] and instantiated for `f32` (training, persistence) and `f64`
//! (gradient verification, reference computations).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for constants.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        <Self as ToPrimitive>::to_f32(&self).unwrap_or(f32::NAN)
    }

    #[inline]
    fn of_f32(v: f32) -> Self {
        <Self as FromPrimitive>::from_f32(v).expect("f32 representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
