//! Two-branch convolutional classifier over bootstrap trial sets.
//!
//! The network consumes one sample = two tensors of shape
//! (direction 2, trial S, time T), one per sentiment condition. Each branch
//! runs a backbone of two Inception-style convolution blocks with a GELU in
//! between, averages over the trial dimension, and the concatenated per-time
//! features of both branches feed a two-layer fully connected head ending in
//! a sigmoid probability.
//!
//! Everything here is written by hand: direct convolutions, analytic
//! backward passes, Adam, initialization and the checkpoint format. All
//! numerics are generic over [`Scalar`] so the same code runs in f32 for
//! training and f64 for gradient checking and attribution.

mod adam;
mod checkpoint;
mod conv;
mod inception;
mod model;
mod ops;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use conv::{conv2d_backward, conv2d_forward, row_conv_backward, row_conv_forward};
pub use inception::{InceptionConv, KERNEL_SIZES, MAX_KERNEL};
pub use model::{
    inception_block_param_count, model_param_count, Model, ModelConfig, Sample, Workspace,
};
pub use ops::{gelu, gelu_prime, relu, sigmoid, weighted_bce, BCE_CLAMP};
pub use tensor::Tensor;

/// Floating point currency of the network. f32 is the training default,
/// f64 backs gradient checks and integrated gradients.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Total order on raw values, used for canonical trial ordering.
    fn total_order(a: Self, b: Self) -> std::cmp::Ordering;

    /// Hyperbolic tangent. The f32 implementation trades the last ulp or
    /// two for a large speedup; it sits inside the GELU, which runs a few
    /// hundred thousand times per training sample.
    fn tanh_fast(self) -> Self;
}

impl Scalar for f32 {
    fn total_order(a: Self, b: Self) -> std::cmp::Ordering {
        a.total_cmp(&b)
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        fast_tanh_f32(self)
    }
}

impl Scalar for f64 {
    fn total_order(a: Self, b: Self) -> std::cmp::Ordering {
        a.total_cmp(&b)
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}

/// exp(x) for non-positive x: split off the power of two, evaluate a
/// degree-6 Taylor polynomial on the reduced argument (|r| <= ln2/2, where
/// the truncation error is ~1e-7 relative) and assemble the exponent bits
/// directly. Branch-free so it vectorizes when inlined into a loop; inputs
/// are clamped to -80 where the result is 0 to f32 precision anyway.
#[inline]
fn fast_exp_nonpos_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5 * 2^23 rounds x * log2(e) to the nearest integer in the
    // mantissa of `nf` (exponent is pinned to 23 for the whole input range),
    // so the integer part can be read back with bit arithmetic instead of a
    // float-to-int cast. Keeps the loop free of libm calls so it vectorizes.
    const MAGIC: f32 = 12_582_912.0;
    const MAGIC_BITS: i32 = 0x4B40_0000;
    let x = x.max(-80.0);
    let nf = x * LOG2E + MAGIC;
    let n = nf - MAGIC;
    let n_int = (nf.to_bits() as i32).wrapping_sub(MAGIC_BITS);
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    f32::from_bits(((n_int + 127) << 23) as u32) * p
}

/// tanh via exp(-2|x|), branch-free: (1 - e) / (1 + e) with the sign
/// restored by copysign. Accurate to a few f32 ulps over the whole line.
#[inline]
fn fast_tanh_f32(x: f32) -> f32 {
    let e = fast_exp_nonpos_f32(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Lossless-enough literal conversion; panics only on NaN literals.
#[inline]
pub fn fl<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("finite literal")
}
