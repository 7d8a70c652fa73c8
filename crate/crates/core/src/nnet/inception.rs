//! Inception-style convolution block: six parallel same-padded square
//! kernels (1, 3, 5, 7, 9, 11) whose outputs are averaged elementwise.
//!
//! Averaging commutes with convolution, so the block is computed as a single
//! convolution with an effective 11x11 kernel: each smaller kernel is
//! zero-embedded at the center and the six are averaged, as are the biases.
//! This is exact (zero-padding semantics line up for centered odd kernels)
//! and is verified against the naive six-convolution composition in tests.
//! Gradients flow back by cropping the effective-kernel gradient and scaling
//! by 1/6.

use super::conv::conv2d_forward;
use super::{fl, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Parallel kernel sizes of one block.
pub const KERNEL_SIZES: [usize; 6] = [1, 3, 5, 7, 9, 11];
/// Largest kernel; effective kernels have this extent.
pub const MAX_KERNEL: usize = 11;

/// One square kernel bank of the block, with its gradient buffers.
#[derive(Debug, Clone)]
pub struct KernelSet<T> {
    pub k: usize,
    /// `[out_c][in_c][k][k]`
    pub w: Vec<T>,
    /// `[out_c]`
    pub b: Vec<T>,
    pub gw: Vec<T>,
    pub gb: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct InceptionConv<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub sets: Vec<KernelSet<T>>,
}

impl<T: Scalar> InceptionConv<T> {
    pub fn new(in_c: usize, out_c: usize) -> Self {
        let sets = KERNEL_SIZES
            .iter()
            .map(|&k| KernelSet {
                k,
                w: vec![T::zero(); out_c * in_c * k * k],
                b: vec![T::zero(); out_c],
                gw: vec![T::zero(); out_c * in_c * k * k],
                gb: vec![T::zero(); out_c],
            })
            .collect();
        InceptionConv { in_c, out_c, sets }
    }

    /// Glorot-uniform init per kernel bank; biases start at zero.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        for set in &mut self.sets {
            let fan_in = (self.in_c * set.k * set.k) as f64;
            let fan_out = (self.out_c * set.k * set.k) as f64;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            for w in set.w.iter_mut() {
                *w = fl(rng.gen_range(-bound..bound));
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.sets.iter().map(|s| s.w.len() + s.b.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.sets {
            s.gw.fill(T::zero());
            s.gb.fill(T::zero());
        }
    }

    /// Effective kernel center rows `[out_c][in_c][11]` and biases
    /// `[out_c]`. Sufficient for single-row inputs, where off-center kernel
    /// rows only ever multiply padding zeros.
    pub fn merged_center_rows(&self, rows: &mut [T], bias: &mut [T]) {
        let (ic, oc) = (self.in_c, self.out_c);
        assert_eq!(rows.len(), oc * ic * MAX_KERNEL);
        assert_eq!(bias.len(), oc);
        rows.fill(T::zero());
        bias.fill(T::zero());
        let inv6: T = fl(1.0 / KERNEL_SIZES.len() as f64);
        for set in &self.sets {
            let k = set.k;
            let center = k / 2;
            let off = (MAX_KERNEL - k) / 2;
            for o in 0..oc {
                bias[o] += inv6 * set.b[o];
                for i in 0..ic {
                    let src = &set.w[((o * ic + i) * k + center) * k..][..k];
                    let dst = &mut rows[(o * ic + i) * MAX_KERNEL + off..][..k];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += inv6 * *s;
                    }
                }
            }
        }
    }

    /// Full effective kernel `[out_c][in_c][11][11]` and biases; used for
    /// general 2-D inputs and the equivalence tests.
    pub fn merged_full(&self, kernel: &mut [T], bias: &mut [T]) {
        let (ic, oc) = (self.in_c, self.out_c);
        assert_eq!(kernel.len(), oc * ic * MAX_KERNEL * MAX_KERNEL);
        assert_eq!(bias.len(), oc);
        kernel.fill(T::zero());
        bias.fill(T::zero());
        let inv6: T = fl(1.0 / KERNEL_SIZES.len() as f64);
        for set in &self.sets {
            let k = set.k;
            let off = (MAX_KERNEL - k) / 2;
            for o in 0..oc {
                bias[o] += inv6 * set.b[o];
                for i in 0..ic {
                    for ky in 0..k {
                        let src = &set.w[((o * ic + i) * k + ky) * k..][..k];
                        let dst = &mut kernel
                            [((o * ic + i) * MAX_KERNEL + off + ky) * MAX_KERNEL + off..][..k];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += inv6 * *s;
                        }
                    }
                }
            }
        }
    }

    /// Distribute gradients on the effective center rows and biases back to
    /// the six kernel banks. Off-center kernel rows receive no gradient on
    /// single-row inputs (they only ever multiply padding zeros).
    pub fn scatter_center_row_grads(&mut self, g_rows: &[T], g_bias: &[T]) {
        let (ic, oc) = (self.in_c, self.out_c);
        assert_eq!(g_rows.len(), oc * ic * MAX_KERNEL);
        assert_eq!(g_bias.len(), oc);
        let inv6: T = fl(1.0 / KERNEL_SIZES.len() as f64);
        for set in &mut self.sets {
            let k = set.k;
            let center = k / 2;
            let off = (MAX_KERNEL - k) / 2;
            for o in 0..oc {
                set.gb[o] += inv6 * g_bias[o];
                for i in 0..ic {
                    let src = &g_rows[(o * ic + i) * MAX_KERNEL + off..][..k];
                    let dst = &mut set.gw[((o * ic + i) * k + center) * k..][..k];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += inv6 * *s;
                    }
                }
            }
        }
    }

    /// Reference forward on a general 2-D input: run the six convolutions
    /// separately and average. Kept for tests and diagnostics.
    pub fn forward_naive(&self, input: &[T], h: usize, w: usize) -> Vec<T> {
        let plane = h * w;
        let mut acc = vec![T::zero(); self.out_c * plane];
        let mut tmp = vec![T::zero(); self.out_c * plane];
        let inv6: T = fl(1.0 / KERNEL_SIZES.len() as f64);
        for set in &self.sets {
            conv2d_forward(
                input, self.in_c, h, w, &set.w, &set.b, self.out_c, set.k, &mut tmp,
            );
            for (a, t) in acc.iter_mut().zip(&tmp) {
                *a += inv6 * *t;
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::conv::row_conv_forward;
    use crate::seed::derive_rng;
    use rand::Rng;

    fn random_block(in_c: usize, out_c: usize, tag: u64) -> InceptionConv<f64> {
        let mut block = InceptionConv::<f64>::new(in_c, out_c);
        let mut rng = derive_rng(tag, "inception-test", 0);
        block.init(&mut rng);
        for set in &mut block.sets {
            for b in set.b.iter_mut() {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
        block
    }

    #[test]
    fn test_param_count_closed_form() {
        // sum k^2 over {1,3,5,7,9,11} = 286 per (in, out) pair, plus six
        // biases per output channel.
        let block = InceptionConv::<f32>::new(1, 8);
        assert_eq!(block.param_count(), 286 * 8 + 6 * 8);
        let block2 = InceptionConv::<f32>::new(8, 1);
        assert_eq!(block2.param_count(), 286 * 8 + 6);
    }

    #[test]
    fn test_merged_kernel_equals_naive_average() {
        let block = random_block(2, 3, 5);
        let (h, w) = (9, 14);
        let mut rng = derive_rng(6, "inception-test", 1);
        let input: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let naive = block.forward_naive(&input, h, w);

        let mut eff = vec![0.0; 3 * 2 * MAX_KERNEL * MAX_KERNEL];
        let mut eff_b = vec![0.0; 3];
        block.merged_full(&mut eff, &mut eff_b);
        let mut merged = vec![0.0; 3 * h * w];
        conv2d_forward(&input, 2, h, w, &eff, &eff_b, 3, MAX_KERNEL, &mut merged);

        for (a, b) in merged.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn test_center_rows_match_full_merge_on_single_row() {
        let block = random_block(3, 2, 7);
        let t = 40;
        let mut rng = derive_rng(8, "inception-test", 2);
        let input: Vec<f64> = (0..3 * t).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let naive = block.forward_naive(&input, 1, t);

        let mut rows = vec![0.0; 2 * 3 * MAX_KERNEL];
        let mut bias = vec![0.0; 2];
        block.merged_center_rows(&mut rows, &mut bias);
        let mut out = vec![0.0; 2 * t];
        row_conv_forward(&input, 3, t, &rows, &bias, 2, MAX_KERNEL, &mut out);

        for (a, b) in out.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn test_scatter_center_row_grads_matches_finite_differences() {
        let mut block = random_block(1, 2, 9);
        let t = 17;
        let mut rng = derive_rng(10, "inception-test", 3);
        let input: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coeff: Vec<f64> = (0..2 * t).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |b: &InceptionConv<f64>| -> f64 {
            let mut rows = vec![0.0; 2 * MAX_KERNEL];
            let mut bias = vec![0.0; 2];
            b.merged_center_rows(&mut rows, &mut bias);
            let mut out = vec![0.0; 2 * t];
            row_conv_forward(&input, 1, t, &rows, &bias, 2, MAX_KERNEL, &mut out);
            out.iter().zip(&coeff).map(|(o, c)| o * c).sum()
        };

        // Analytic: backprop through the row conv, then scatter.
        let mut rows = vec![0.0; 2 * MAX_KERNEL];
        let mut bias = vec![0.0; 2];
        block.merged_center_rows(&mut rows, &mut bias);
        let mut g_rows = vec![0.0; 2 * MAX_KERNEL];
        let mut g_bias = vec![0.0; 2];
        crate::nnet::conv::row_conv_backward(
            &input, 1, t, &rows, 2, MAX_KERNEL, &coeff, None, &mut g_rows, &mut g_bias,
        );
        block.zero_grads();
        block.scatter_center_row_grads(&g_rows, &g_bias);

        let h_step = 1e-6;
        for si in 0..block.sets.len() {
            let k = block.sets[si].k;
            let center = k / 2;
            for o in 0..2 {
                // Center-row weights carry gradient.
                for kx in 0..k {
                    let wi = (o * k + center) * k + kx;
                    let mut bp = block.clone();
                    bp.sets[si].w[wi] += h_step;
                    let mut bm = block.clone();
                    bm.sets[si].w[wi] -= h_step;
                    let numeric = (loss(&bp) - loss(&bm)) / (2.0 * h_step);
                    let analytic = block.sets[si].gw[wi];
                    assert!(
                        (analytic - numeric).abs() < 1e-6 * numeric.abs().max(1.0),
                        "k={k} o={o} kx={kx}: {analytic} vs {numeric}"
                    );
                }
                // Off-center rows are dead on single-row inputs.
                if k > 1 {
                    let wi = (o * k) * k; // first row, first column
                    assert_eq!(block.sets[si].gw[wi], 0.0);
                    let mut bp = block.clone();
                    bp.sets[si].w[wi] += 1.0;
                    assert_eq!(loss(&bp), loss(&block), "off-center weight must be inert");
                }
                // Bias gradient.
                let mut bp = block.clone();
                bp.sets[si].b[o] += h_step;
                let mut bm = block.clone();
                bm.sets[si].b[o] -= h_step;
                let numeric = (loss(&bp) - loss(&bm)) / (2.0 * h_step);
                assert!((block.sets[si].gb[o] - numeric).abs() < 1e-6 * numeric.abs().max(1.0));
            }
        }
    }
}
