//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All model, prior, divergence and likelihood code is written against
//! [`Real`], so the same routines run in `f64` (the default used by the
//! experiment harness) or `f32`. Special functions that have no generic
//! implementation (normal CDF, log-gamma) are evaluated in `f64` and cast
//! back.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the crate: `f32` or `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Display + 'static
{
    const INFINITY: Self;
    const NEG_INFINITY: Self;

    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Real for f64 {
    const INFINITY: Self = f64::INFINITY;
    const NEG_INFINITY: Self = f64::NEG_INFINITY;
}

impl Real for f32 {
    const INFINITY: Self = f32::INFINITY;
    const NEG_INFINITY: Self = f32::NEG_INFINITY;
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn norm_pdf<T: Real>(x: T) -> T {
    let x = x.as_f64();
    T::lit((-0.5 * x * x - LN_SQRT_2PI).exp())
}

/// log of the standard normal density.
pub fn log_norm_pdf<T: Real>(x: T) -> T {
    let x = x.as_f64();
    T::lit(-0.5 * x * x - LN_SQRT_2PI)
}

/// Standard normal CDF Φ(x).
pub fn norm_cdf<T: Real>(x: T) -> T {
    T::lit(norm_cdf_f64(x.as_f64()))
}

fn norm_cdf_f64(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// log Φ(x), accurate in both tails.
pub fn log_norm_cdf<T: Real>(x: T) -> T {
    T::lit(log_norm_cdf_f64(x.as_f64()))
}

pub(crate) fn log_norm_cdf_f64(x: f64) -> f64 {
    if x > 5.0 {
        // Φ(x) = 1 - Φ(-x) with Φ(-x) tiny.
        (-norm_cdf_f64(-x)).ln_1p()
    } else if x > -30.0 {
        norm_cdf_f64(x).ln()
    } else {
        // Asymptotic expansion of the Mills ratio.
        let z = x * x;
        let series = 1.0 - 1.0 / z + 3.0 / (z * z) - 15.0 / (z * z * z) + 105.0 / (z * z * z * z);
        -0.5 * z - LN_SQRT_2PI - (-x).ln() + series.ln()
    }
}

/// ln Γ(x) for x > 0.
pub fn ln_gamma<T: Real>(x: T) -> T {
    T::lit(statrs::function::gamma::ln_gamma(x.as_f64()))
}

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_norm_cdf_is_continuous_across_branches() {
        for &x in &[5.0_f64, -30.0] {
            let lo = log_norm_cdf_f64(x - 1e-9);
            let hi = log_norm_cdf_f64(x + 1e-9);
            assert!((lo - hi).abs() < 1e-6 * lo.abs().max(1e-12), "{x}: {lo} vs {hi}");
        }
        assert!((log_norm_cdf_f64(0.0) - 0.5_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_and_softplus_agree_with_naive_forms() {
        for &x in &[-3.0_f64, -0.2, 0.0, 0.7, 4.0] {
            assert!((sigmoid(x) - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15);
            assert!((softplus(x) - (1.0 + x.exp()).ln()).abs() < 1e-14);
        }
        assert!((softplus(800.0_f64) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0_f64) >= 0.0);
    }

    #[test]
    fn f32_path_compiles_and_is_close() {
        let v: f32 = norm_cdf(0.3_f32);
        assert!((v as f64 - norm_cdf(0.3_f64)).abs() < 1e-6);
    }
}
