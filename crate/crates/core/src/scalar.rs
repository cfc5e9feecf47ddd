//! Scalar abstraction for the numeric stack.
//!
//! All tensor math in this crate is generic over [`Scalar`] so that the same
//! code runs in `f32` for training and in `f64` for finite-difference
//! gradient checks. Concrete aliases live at the crate root.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand_distr::uniform::SampleUniform;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type usable throughout the numeric stack.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + SampleUniform
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (panics only on NaN-free impossibility).
    fn from_f64_(v: f64) -> Self {
        Self::from_f64(v).expect("f64 -> Scalar conversion")
    }
    /// Lossy conversion to `f64`.
    fn to_f64_(self) -> f64 {
        self.to_f64().expect("Scalar -> f64 conversion")
    }
    /// Lossy conversion to `f32` (used by the on-disk tensor format).
    fn to_f32_(self) -> f32 {
        self.to_f32().expect("Scalar -> f32 conversion")
    }
    /// Lossy conversion from `f32`.
    fn from_f32_(v: f32) -> Self {
        Self::from_f32(v).expect("f32 -> Scalar conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
