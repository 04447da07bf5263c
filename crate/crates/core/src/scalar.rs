//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an f64 literal.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Raw IEEE bits widened to u64, used for byte-equality checks.
    fn bits(self) -> u64;

    /// Error function, evaluated in f64.
    fn erf(self) -> Self {
        Self::of(libm::erf(self.as_f64()))
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Logistic sigmoid.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + e^x) without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// CDF of N(0, sigma^2) at `x`.
pub fn normal_cdf<T: Scalar>(x: T, sigma: T) -> T {
    let z = x / (sigma * T::of(std::f64::consts::SQRT_2));
    T::of(0.5) * (T::one() + z.erf())
}

/// Density of N(0, sigma^2) at `x`.
pub fn normal_pdf<T: Scalar>(x: T, sigma: T) -> T {
    let z = x / sigma;
    (T::of(-0.5) * z * z).exp() / (sigma * T::of((2.0 * std::f64::consts::PI).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert_eq!(normal_cdf(0.0f64, 0.3), 0.5);
        assert!((normal_cdf(1.0f64, 1.0) - 0.841_344_746).abs() < 1e-8);
        assert!((normal_cdf(-1.0f32, 1.0) - 0.158_655_25).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert!((softplus(-800.0f64)).abs() < 1e-300);
        assert_eq!(softplus(800.0f64), 800.0);
    }
}
