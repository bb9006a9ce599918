//! Scalar abstraction and the special functions the distribution families
//! need.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numerical core is generic over (`f32`, `f64`).
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[inline]
pub fn from_u64<T: Real>(k: u64) -> T {
    T::from_u64(k).unwrap_or_else(T::infinity)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

// The special functions evaluate in f64 and round to `T`; f32 callers lose
// nothing and f64 callers get the full precision of the backing routines.

pub fn erfc<T: Real>(x: T) -> T {
    lit(statrs::function::erf::erfc(to_f64(x)))
}

pub fn erfc_inv<T: Real>(x: T) -> T {
    lit(statrs::function::erf::erfc_inv(to_f64(x)))
}

pub fn ln_gamma<T: Real>(x: T) -> T {
    lit(statrs::function::gamma::ln_gamma(to_f64(x)))
}

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q<T: Real>(a: T, x: T) -> T {
    if x <= T::zero() {
        return T::one();
    }
    lit(statrs::function::gamma::gamma_ur(to_f64(a), to_f64(x)))
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p<T: Real>(a: T, x: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    lit(statrs::function::gamma::gamma_lr(to_f64(a), to_f64(x)))
}

/// Regularized incomplete beta I_x(a, b).
pub fn beta_reg<T: Real>(a: T, b: T, x: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    if x >= T::one() {
        return T::one();
    }
    lit(statrs::function::beta::beta_reg(to_f64(a), to_f64(b), to_f64(x)))
}

/// Type-7 (linear interpolation) quantile of an ascending slice.
pub fn quantile_sorted<T: Real>(sorted: &[T], p: T) -> T {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * from_u64::<T>((n - 1) as u64);
    let lo = h.floor().to_usize().unwrap_or(0).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = h - h.floor();
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn mean<T: Real>(xs: &[T]) -> T {
    let n = from_u64::<T>(xs.len() as u64);
    xs.iter().fold(T::zero(), |acc, &x| acc + x) / n
}

pub fn median<T: Real>(xs: &[T]) -> T {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    quantile_sorted(&v, lit(0.5))
}
