//! Scalar element abstraction so tensor math can run at f32 (training,
//! codec) or f64 (algebraic identity tests, gradient checks).

use ndarray::NdFloat;

pub trait Element: NdFloat + std::iter::Sum + 'static {
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
    /// Error function, evaluated in double precision.
    fn erf(self) -> Self;
}

impl Element for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        statrs::function::erf::erf(self as f64) as f32
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        statrs::function::erf::erf(self)
    }
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}
