//! Scalar abstraction so the model core runs in either f32 or f64.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point scalar usable throughout the tensor core.
pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + Display + Debug + Send + Sync + Sum + 'static
{
    fn from_real(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 convertible to scalar")
    }
    fn real(self) -> f64;
}

impl Scalar for f32 {
    fn real(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn real(self) -> f64 {
        self
    }
}
