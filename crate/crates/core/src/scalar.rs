//! The floating-point abstraction the numerical core is written against.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for the supported types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    /// Relative residual accepted for moment matching.
    fn tol_exact() -> Self {
        Self::lit(1e-8).max(Self::epsilon() * Self::lit(1e4))
    }

    /// Relative residual accepted for a null vector.
    fn tol_null() -> Self {
        Self::lit(1e-10).max(Self::epsilon() * Self::lit(1e3))
    }

    /// Weights in `[-negative_weight_slack, 0)` are rounding noise and get clamped to zero.
    fn negative_weight_slack() -> Self {
        Self::lit(1e-12).max(Self::epsilon() * Self::lit(16.0))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerances_track_precision() {
        assert_eq!(f64::tol_exact(), 1e-8);
        assert_eq!(f64::tol_null(), 1e-10);
        assert_eq!(f64::negative_weight_slack(), 1e-12);
        assert!(f32::tol_exact() > 1e-4);
        assert!(f32::negative_weight_slack() > 1e-7);
    }
}
