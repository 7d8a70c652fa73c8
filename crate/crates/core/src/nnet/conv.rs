//! Direct same-padded 2-D convolution, plus the single-row fast path.
//!
//! Layouts are row-major: input `[in_c][h][w]`, weights
//! `[out_c][in_c][k][k]`, output `[out_c][h][w]`. Kernels are odd-sized and
//! zero padding keeps spatial dimensions. The inner loops walk the
//! contiguous last axis so they vectorize.

use super::Scalar;

/// Dot product with eight independent accumulator lanes so the reduction
/// vectorizes. The summation order is fixed, so results are deterministic.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let mut acc = [T::zero(); LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let ao = &a[c * LANES..(c + 1) * LANES];
        let bo = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += ao[l] * bo[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * LANES..n {
        s += a[i] * b[i];
    }
    s
}

/// Lane-unrolled sum; same determinism argument as [`dot`].
#[inline]
pub(crate) fn vsum<T: Scalar>(a: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len();
    let mut acc = [T::zero(); LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let ao = &a[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += ao[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for v in &a[chunks * LANES..] {
        s += *v;
    }
    s
}

/// Same-padded convolution forward. `out` is overwritten.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    out_c: usize,
    k: usize,
    out: &mut [T],
) {
    assert!(k % 2 == 1, "kernel size must be odd, got {k}");
    assert_eq!(input.len(), in_c * h * w);
    assert_eq!(weight.len(), out_c * in_c * k * k);
    assert_eq!(bias.len(), out_c);
    assert_eq!(out.len(), out_c * h * w);
    let p = (k / 2) as isize;
    let plane = h * w;

    for oc in 0..out_c {
        let out_plane = &mut out[oc * plane..(oc + 1) * plane];
        out_plane.fill(bias[oc]);
        for ic in 0..in_c {
            let in_plane = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let wv = weight[((oc * in_c + ic) * k + ky) * k + kx];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let iy = (y as isize + dy) as usize;
                        let src =
                            &in_plane[iy * w + (x_lo as isize + dx) as usize..iy * w + (x_hi as isize + dx) as usize];
                        let dst = &mut out_plane[y * w + x_lo..y * w + x_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass of [`conv2d_forward`]. Gradients are accumulated (`+=`)
/// into the provided buffers; pass `None` for `g_input` when input
/// gradients are not needed.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    out_c: usize,
    k: usize,
    g_out: &[T],
    mut g_input: Option<&mut [T]>,
    g_weight: &mut [T],
    g_bias: &mut [T],
) {
    assert!(k % 2 == 1);
    let p = (k / 2) as isize;
    let plane = h * w;
    assert_eq!(g_out.len(), out_c * plane);
    assert_eq!(g_weight.len(), out_c * in_c * k * k);
    assert_eq!(g_bias.len(), out_c);
    if let Some(ref gi) = g_input {
        assert_eq!(gi.len(), in_c * plane);
    }

    for oc in 0..out_c {
        let g_plane = &g_out[oc * plane..(oc + 1) * plane];
        g_bias[oc] += vsum(g_plane);
        for ic in 0..in_c {
            let in_plane = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let widx = ((oc * in_c + ic) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let iy = (y as isize + dy) as usize;
                        let in_row = &in_plane
                            [iy * w + (x_lo as isize + dx) as usize..iy * w + (x_hi as isize + dx) as usize];
                        let g_row = &g_plane[y * w + x_lo..y * w + x_hi];
                        acc += dot(g_row, in_row);
                        if let Some(gi) = g_input.as_deref_mut() {
                            let gi_row = &mut gi[ic * plane + iy * w + (x_lo as isize + dx) as usize
                                ..ic * plane + iy * w + (x_hi as isize + dx) as usize];
                            for (d, g) in gi_row.iter_mut().zip(g_row) {
                                *d += wv * *g;
                            }
                        }
                    }
                    g_weight[widx] += acc;
                }
            }
        }
    }
}

/// 1-D same-padded convolution over the time axis of `[in_c][t]` rows.
/// This is the backbone hot path: trials are processed independently, so
/// every convolution the model runs is a row convolution.
pub fn row_conv_forward<T: Scalar>(
    input: &[T],
    in_c: usize,
    t_len: usize,
    weight: &[T],
    bias: &[T],
    out_c: usize,
    klen: usize,
    out: &mut [T],
) {
    assert!(klen % 2 == 1);
    assert_eq!(input.len(), in_c * t_len);
    assert_eq!(weight.len(), out_c * in_c * klen);
    assert_eq!(out.len(), out_c * t_len);
    let p = (klen / 2) as isize;

    for oc in 0..out_c {
        let out_row = &mut out[oc * t_len..(oc + 1) * t_len];
        out_row.fill(bias[oc]);
        for ic in 0..in_c {
            let in_row = &input[ic * t_len..(ic + 1) * t_len];
            for kx in 0..klen {
                let dx = kx as isize - p;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((t_len as isize - dx).min(t_len as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                let wv = weight[(oc * in_c + ic) * klen + kx];
                let src = &in_row[(x_lo as isize + dx) as usize..(x_hi as isize + dx) as usize];
                let dst = &mut out_row[x_lo..x_hi];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * *s;
                }
            }
        }
    }
}

/// Backward pass of [`row_conv_forward`]; gradients accumulate.
#[allow(clippy::too_many_arguments)]
pub fn row_conv_backward<T: Scalar>(
    input: &[T],
    in_c: usize,
    t_len: usize,
    weight: &[T],
    out_c: usize,
    klen: usize,
    g_out: &[T],
    mut g_input: Option<&mut [T]>,
    g_weight: &mut [T],
    g_bias: &mut [T],
) {
    assert!(klen % 2 == 1);
    let p = (klen / 2) as isize;

    for oc in 0..out_c {
        let g_row = &g_out[oc * t_len..(oc + 1) * t_len];
        g_bias[oc] += vsum(g_row);
        for ic in 0..in_c {
            let in_row = &input[ic * t_len..(ic + 1) * t_len];
            for kx in 0..klen {
                let dx = kx as isize - p;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((t_len as isize - dx).min(t_len as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                let widx = (oc * in_c + ic) * klen + kx;
                let src = &in_row[(x_lo as isize + dx) as usize..(x_hi as isize + dx) as usize];
                let g_seg = &g_row[x_lo..x_hi];
                g_weight[widx] += dot(g_seg, src);
                if let Some(gi) = g_input.as_deref_mut() {
                    let gi_seg = &mut gi[ic * t_len + (x_lo as isize + dx) as usize
                        ..ic * t_len + (x_hi as isize + dx) as usize];
                    let wv = weight[widx];
                    for (d, g) in gi_seg.iter_mut().zip(g_seg) {
                        *d += wv * *g;
                    }
                }
            }
        }
    }
}
