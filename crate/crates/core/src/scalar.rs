//! Scalar abstraction shared by the geometric and scoring kernels.
//!
//! Everything that is pure arithmetic (geometry, kinematics, metric
//! aggregation, reward shaping, flow interpolation) is written against
//! [`Real`] so it can be instantiated at `f32` or `f64`. The learned
//! components work at `f64` only.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize representable")
    }

    /// Clamp into `[lo, hi]`; NaN stays NaN.
    #[inline]
    fn clip(self, lo: Self, hi: Self) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut r = a % two_pi;
    if r <= -T::PI() {
        r = r + two_pi;
    } else if r > T::PI() {
        r = r - two_pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        let pi = std::f64::consts::PI;
        assert_eq!(wrap_angle(pi), pi);
        assert!((wrap_angle(-pi) - pi).abs() < 1e-15);
        assert!((wrap_angle(3.0 * pi) - pi).abs() < 1e-12);
        assert!((wrap_angle(0.5f32) - 0.5).abs() < 1e-7);
        assert!((wrap_angle(2.0 * pi + 0.25) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn clip_keeps_nan() {
        assert!(f64::NAN.clip(0.0, 1.0).is_nan());
        assert_eq!(2.0f64.clip(0.0, 1.0), 1.0);
        assert_eq!((-2.0f32).clip(0.0, 1.0), 0.0);
    }
}
