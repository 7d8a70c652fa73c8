//! Pointwise activations and the loss, with analytic derivatives.

use super::{fl, Scalar};

/// Clamp bounds for predicted probabilities inside the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-form GELU. Returns (value, cached tanh(u)) so the backward pass can
/// reuse the expensive tanh.
#[inline]
pub fn gelu_cached<T: Scalar>(x: T) -> (T, T) {
    let t = gelu_inner_tanh(x);
    (gelu_value(x, t), t)
}

/// tanh(sqrt(2/pi) * (x + 0.044715 x^3)), the cacheable half of GELU. Kept
/// separate from [`gelu_value`] so callers can run each over a whole buffer
/// in its own loop; the fused tuple version defeats autovectorization.
#[inline]
pub fn gelu_inner_tanh<T: Scalar>(x: T) -> T {
    let c: T = fl(SQRT_2_OVER_PI);
    let a: T = fl(GELU_CUBIC);
    (c * (x + a * x * x * x)).tanh_fast()
}

/// GELU output given the input and the cached tanh from [`gelu_inner_tanh`].
#[inline]
pub fn gelu_value<T: Scalar>(x: T, tanh_u: T) -> T {
    let half: T = fl(0.5);
    half * x * (T::one() + tanh_u)
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_cached(x).0
}

/// d GELU / dx given the input and the cached tanh(u).
#[inline]
pub fn gelu_prime<T: Scalar>(x: T, tanh_u: T) -> T {
    let c: T = fl(SQRT_2_OVER_PI);
    let a3: T = fl(3.0 * GELU_CUBIC);
    let half: T = fl(0.5);
    let sech2 = T::one() - tanh_u * tanh_u;
    let du = c * (T::one() + a3 * x * x);
    half * (T::one() + tanh_u) + half * x * sech2 * du
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Class-weighted binary cross entropy on a single prediction. The
/// probability is clamped to [1e-7, 1 - 1e-7] before the logs.
#[inline]
pub fn weighted_bce<T: Scalar>(p: T, label: T, weight: T) -> T {
    let lo: T = fl(BCE_CLAMP);
    let hi: T = T::one() - lo;
    let p = p.max(lo).min(hi);
    -weight * (label * p.ln() + (T::one() - label) * (T::one() - p).ln())
}
