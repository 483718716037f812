//! Floating-point abstraction shared by the absorption and estimation code.

use nalgebra::RealField;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Real scalar used by the numerical core: `f32` or `f64`.
pub trait Scalar:
    RealField + Float + FromPrimitive + ToPrimitive + Copy + Sum + Send + Sync + Debug + Display + 'static
{
    /// Lossy conversion from `f64`, used for constants and tolerances.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite constant")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Default relative tolerance for iterated demeaning at this precision.
    fn default_tol() -> f64;
}

impl Scalar for f32 {
    fn default_tol() -> f64 {
        1e-5
    }
}

impl Scalar for f64 {
    fn default_tol() -> f64 {
        1e-8
    }
}
