//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Everything that does arithmetic is generic over [`Real`], which is
//! implemented for `f32` and `f64`. Sampling and serialization always go
//! through `f64`, so a basis drawn for `f32` is the rounded image of the
//! `f64` basis with the same seed.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type usable by the solvers: `f32` or `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`, rounding if needed.
    fn lit(x: f64) -> Self;

    /// Widens to `f64` (exact for `f32` and `f64`).
    fn as_f64(self) -> f64;

    /// Machine epsilon.
    fn eps() -> Self;

    /// A convergence tolerance that is `requested` for `f64` and is floored
    /// at a small multiple of machine epsilon for narrower types.
    fn tol(requested: f64) -> Self {
        let floor = 64.0 * Self::eps().as_f64();
        Self::lit(requested.max(floor))
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn eps() -> Self {
                <$t>::EPSILON
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_floor_tracks_precision() {
        assert_eq!(f64::tol(1e-10), 1e-10);
        assert!(f32::tol(1e-10) > 1e-6);
    }
}
