//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type the tensor algebra is written against.
///
/// Implemented for `f32` and `f64`. Everything that produces reference or
/// acceptance numbers runs in `f64`; `f32` is supported for storage and
/// quick previews.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Cutoff used when deciding whether a design matrix is numerically
    /// singular: `1e12` in double precision, tighter for narrower types.
    fn singular_condition() -> Self {
        let eps = Self::epsilon();
        let limit = Self::lit(0.01) / eps;
        let cap = Self::lit(1e12);
        if limit < cap {
            limit
        } else {
            cap
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn dot3<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3<T: Real>(a: &[T; 3]) -> T {
    dot3(a, a).sqrt()
}
