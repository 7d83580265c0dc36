//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::str::FromStr;

/// Real scalar the simulation, identification and control code is generic over.
///
/// Implemented for `f32` and `f64`. `nalgebra::RealField` supplies the
/// linear-algebra surface, `num_traits` the primitive conversions.
pub trait Scalar:
    nalgebra::RealField
    + Copy
    + Default
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Display
    + Debug
    + FromStr
{
    /// Lossy conversion from an `f64` literal or parameter.
    fn lit(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("f64 converts to every Scalar")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }

    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Clamp `x` into `[lo, hi]`.
pub(crate) fn clamp<T: Scalar>(x: T, lo: T, hi: T) -> T {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Amplitude limit to `±max`, then rate limit against `prev` by `ramp * ts`.
///
/// When `prev` already lies within `±max` the result does too.
pub fn limit_amplitude_rate<T: Scalar>(cmd: T, prev: T, max: T, ramp: T, ts: T) -> T {
    let amp = clamp(cmd, -max, max);
    let step = ramp * ts;
    clamp(amp, prev - step, prev + step)
}
