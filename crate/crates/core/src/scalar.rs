//! Scalar abstraction shared by every numeric module.

use nalgebra::RealField;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar usable throughout the crate: `f32` or `f64`.
///
/// Tolerances that the library enforces (rotation orthonormality, unit-norm
/// feature checks) depend on the precision of the scalar and are carried as
/// associated constants.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + FloatConst + Default + Send + Sync + 'static
{
    /// Tolerance on `R·Rᵀ − I` and `det R − 1` for a matrix to count as a rotation.
    const ORTHONORMAL_TOL: f64;
    /// Tolerance on `‖f‖ − 1` for a feature vector to count as unit-norm.
    const UNIT_NORM_TOL: f64;

    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }
}

impl Real for f64 {
    const ORTHONORMAL_TOL: f64 = 1e-9;
    const UNIT_NORM_TOL: f64 = 1e-6;
}

impl Real for f32 {
    const ORTHONORMAL_TOL: f64 = 1e-5;
    const UNIT_NORM_TOL: f64 = 1e-5;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_roundtrip() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.25), 0.25f32);
        assert_eq!(f32::from_usize_lossy(7).as_f64(), 7.0);
    }
}
