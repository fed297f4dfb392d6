//! The scalar abstraction every numerical routine is written against.
//!
//! Routines take `T: Scalar` so the same code runs in `f32`, `f64` and in
//! [`Dual`](crate::dual::Dual) arithmetic, the latter giving exact
//! directional derivatives for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// Converts an `f64` literal or constant.
    fn lit(v: f64) -> Self;

    /// The value part, used for discrete decisions (comparisons, neighbor
    /// selection, quantization). Identity for plain floats.
    fn primal(self) -> f64;

    fn count(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn primal(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn primal(self) -> f64 {
        self as f64
    }
}

/// Total order on primal values; NaN sorts last.
pub(crate) fn cmp_primal<T: Scalar>(a: T, b: T) -> std::cmp::Ordering {
    a.primal().total_cmp(&b.primal())
}

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// GELU in its tanh form.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

/// `tanh` clamped to the open interval (-1, 1). Plain `tanh` rounds to
/// exactly ±1 once |x| passes ~19 in `f64`.
pub fn tanh_open<T: Scalar>(x: T) -> T {
    let t = x.tanh();
    let limit = T::one() - T::epsilon() * T::lit(0.5);
    if t > limit {
        limit + (t - t)
    } else if t < -limit {
        -limit + (t - t)
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_open_is_strict() {
        for x in [19.0f64, 40.0, 1e300, -50.0] {
            let t = tanh_open(x);
            assert!(t.abs() < 1.0, "{x} -> {t}");
        }
        let t32 = tanh_open(30.0f32);
        assert!(t32 < 1.0);
        assert_eq!(tanh_open(0.3f64), 0.3f64.tanh());
    }

    #[test]
    fn sigmoid_limits() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(800.0f64) - 1.0).abs() < 1e-300);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(2.0f64) + sigmoid(-2.0f64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softplus_branches_meet() {
        let lo = softplus(20.0f64);
        assert!((lo - 20.0).abs() < 1e-8);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        // tanh-form GELU(1) = 0.841191990...
        assert!((gelu(1.0f64) - 0.8411919906082768).abs() < 1e-12);
    }
}
