//! Scalar abstraction over the floating-point element type.
//!
//! All dense math in this crate is generic over [`Scalar`] so the same model
//! code runs in f64 (training, gradient checks) and f32 (inference).

use std::fmt::{Debug, Display};

/// Floating-point element type: f32 or f64.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function, used by the exact GELU.
    fn erf(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}
