//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar the numerical core is generic over (`f32` or `f64`).
///
/// Linear algebra goes through nalgebra's `RealField`; conversions to and
/// from `f64` go through num-traits. Monte Carlo statistics are always
/// accumulated in `f64` regardless of the field type.
pub trait Real:
    RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + Default
    + Sum
    + Display
    + Debug
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Machine epsilon of the type.
    const EPSILON: f64;

    /// Lossy conversion from `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 literal")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// A tolerance stated for `f64` rescaled to this type's precision.
    ///
    /// Tolerances never drop below the stated value, so `f64` code sees the
    /// exact thresholds.
    #[inline]
    fn tolerance(f64_tol: f64) -> f64 {
        f64_tol * (Self::EPSILON / f64::EPSILON).max(1.0)
    }
}

impl Real for f64 {
    const EPSILON: f64 = f64::EPSILON;
}

impl Real for f32 {
    const EPSILON: f64 = f32::EPSILON as f64;
}

/// Unit roundoff (half machine epsilon).
pub fn unit_roundoff<T: Real>() -> f64 {
    T::EPSILON / 2.0
}
