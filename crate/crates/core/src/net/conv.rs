//! 3x3 zero-padded, stride-1 convolution via im2col and a dense product.

use crate::scalar::Scalar;

pub(crate) const TAPS: usize = 9;

/// Expands `input` (channels x h x w) into a (channels * 9) x (h * w) matrix,
/// reusing the allocation of `col`.
pub(crate) fn im2col_into<T: Scalar>(input: &[T], channels: usize, h: usize, w: usize, col: &mut Vec<T>) {
    let hw = h * w;
    col.resize(channels * TAPS * hw, T::zero());
    for ci in 0..channels {
        let src = &input[ci * hw..(ci + 1) * hw];
        for k in 0..TAPS {
            let dy = k as isize / 3 - 1;
            let dx = k as isize % 3 - 1;
            let dst = &mut col[(ci * TAPS + k) * hw..(ci * TAPS + k + 1) * hw];
            let x0 = (-dx).max(0) as usize;
            let x1 = (w as isize - dx).min(w as isize) as usize;
            for y in 0..h {
                let dst_row = &mut dst[y * w..(y + 1) * w];
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    dst_row.fill(T::zero());
                    continue;
                }
                let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                dst_row[..x0].fill(T::zero());
                dst_row[x1..].fill(T::zero());
                let s0 = (x0 as isize + dx) as usize;
                dst_row[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn im2col<T: Scalar>(input: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let mut col = Vec::new();
    im2col_into(input, channels, h, w, &mut col);
    col
}

/// Adjoint of [`im2col_into`]: scatters column gradients back onto the input.
pub(crate) fn col2im_into<T: Scalar>(col: &[T], channels: usize, h: usize, w: usize, out: &mut Vec<T>) {
    let hw = h * w;
    out.clear();
    out.resize(channels * hw, T::zero());
    for ci in 0..channels {
        let dst = &mut out[ci * hw..(ci + 1) * hw];
        for k in 0..TAPS {
            let dy = k as isize / 3 - 1;
            let dx = k as isize % 3 - 1;
            let src = &col[(ci * TAPS + k) * hw..(ci * TAPS + k + 1) * hw];
            let x0 = (-dx).max(0) as usize;
            let x1 = (w as isize - dx).min(w as isize) as usize;
            let s0 = (x0 as isize + dx) as usize;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let src_row = &src[y * w + x0..y * w + x1];
                let dst_row = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                for (d, &s) in dst_row.iter_mut().zip(src_row) {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn col2im<T: Scalar>(col: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::new();
    col2im_into(col, channels, h, w, &mut out);
    out
}

/// `out = weight * col + bias`, weight is (out_ch, in_ch * 9).
pub(crate) fn conv_forward_into<T: Scalar>(
    weight: &[T],
    bias: &[T],
    col: &[T],
    in_ch: usize,
    out_ch: usize,
    hw: usize,
    out: &mut Vec<T>,
) {
    let k = in_ch * TAPS;
    out.resize(out_ch * hw, T::zero());
    for (o, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias[o]);
    }
    T::gemm(out_ch, k, hw, T::one(), weight, (k as isize, 1), col, (hw as isize, 1), T::one(), out);
}

#[cfg(test)]
pub(crate) fn conv_forward<T: Scalar>(
    weight: &[T],
    bias: &[T],
    col: &[T],
    in_ch: usize,
    out_ch: usize,
    hw: usize,
) -> Vec<T> {
    let mut out = Vec::new();
    conv_forward_into(weight, bias, col, in_ch, out_ch, hw, &mut out);
    out
}

/// Adds the weight and bias gradients for an output gradient (out_ch x hw)
/// onto `d_weight` and `d_bias`.
pub(crate) fn conv_param_grads_acc<T: Scalar>(
    d_out: &[T],
    col: &[T],
    in_ch: usize,
    out_ch: usize,
    hw: usize,
    d_weight: &mut [T],
    d_bias: &mut [T],
) {
    let k = in_ch * TAPS;
    T::gemm(out_ch, hw, k, T::one(), d_out, (hw as isize, 1), col, (1, hw as isize), T::one(), d_weight);
    for (b, r) in d_bias.iter_mut().zip(d_out.chunks_exact(hw)) {
        *b += r.iter().copied().sum::<T>();
    }
}

/// Column-space input gradient `weight^T * d_out`.
pub(crate) fn conv_input_grad_cols_into<T: Scalar>(
    weight: &[T],
    d_out: &[T],
    in_ch: usize,
    out_ch: usize,
    hw: usize,
    d_col: &mut Vec<T>,
) {
    let k = in_ch * TAPS;
    d_col.resize(k * hw, T::zero());
    T::gemm(k, out_ch, hw, T::one(), weight, (1, k as isize), d_out, (hw as isize, 1), T::zero(), d_col);
}

/// Below this many output channels the packed product wastes most of its
/// kernel tile, so the layer is computed tap by tap without a column matrix.
pub(crate) const SMALL_OUT: usize = 4;

/// Contiguous runs `(out_start, in_start, len)` over which output pixel
/// `out_start + i` reads input pixel `in_start + i` for tap `k`.
fn tap_spans(h: usize, w: usize, k: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let dy = k as isize / 3 - 1;
    let dx = k as isize % 3 - 1;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize) as usize;
    (0..h).filter_map(move |y| {
        let sy = y as isize + dy;
        (sy >= 0 && sy < h as isize).then(|| (y * w + x0, (sy as usize * w) + (x0 as isize + dx) as usize, x1 - x0))
    })
}

/// Direct-form [`conv_forward_into`] reading `input` (in_ch x h x w).
pub(crate) fn direct_forward_into<T: Scalar>(
    weight: &[T],
    bias: &[T],
    input: &[T],
    in_ch: usize,
    out_ch: usize,
    (h, w): (usize, usize),
    out: &mut Vec<T>,
) {
    let hw = h * w;
    out.resize(out_ch * hw, T::zero());
    for (o, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias[o]);
        for ci in 0..in_ch {
            let src = &input[ci * hw..(ci + 1) * hw];
            for k in 0..TAPS {
                let wk = weight[(o * in_ch + ci) * TAPS + k];
                for (os, is, n) in tap_spans(h, w, k) {
                    T::axpy(wk, &src[is..is + n], &mut row[os..os + n]);
                }
            }
        }
    }
}

/// Direct-form parameter gradients, accumulated like [`conv_param_grads_acc`].
pub(crate) fn direct_param_grads_acc<T: Scalar>(
    d_out: &[T],
    input: &[T],
    in_ch: usize,
    out_ch: usize,
    (h, w): (usize, usize),
    d_weight: &mut [T],
    d_bias: &mut [T],
) {
    let hw = h * w;
    for (o, g) in d_out.chunks_exact(hw).enumerate().take(out_ch) {
        d_bias[o] += g.iter().copied().sum::<T>();
        for ci in 0..in_ch {
            let src = &input[ci * hw..(ci + 1) * hw];
            for k in 0..TAPS {
                let mut acc = T::zero();
                for (os, is, n) in tap_spans(h, w, k) {
                    acc += T::dot(&g[os..os + n], &src[is..is + n]);
                }
                d_weight[(o * in_ch + ci) * TAPS + k] += acc;
            }
        }
    }
}

/// Direct-form input gradient (in_ch x h x w), overwriting `d_in`.
pub(crate) fn direct_input_grad_into<T: Scalar>(
    weight: &[T],
    d_out: &[T],
    in_ch: usize,
    out_ch: usize,
    (h, w): (usize, usize),
    d_in: &mut Vec<T>,
) {
    let hw = h * w;
    d_in.clear();
    d_in.resize(in_ch * hw, T::zero());
    for (ci, dst) in d_in.chunks_exact_mut(hw).enumerate() {
        for (o, g) in d_out.chunks_exact(hw).enumerate().take(out_ch) {
            for k in 0..TAPS {
                let wk = weight[(o * in_ch + ci) * TAPS + k];
                for (os, is, n) in tap_spans(h, w, k) {
                    T::axpy(wk, &g[os..os + n], &mut dst[is..is + n]);
                }
            }
        }
    }
}
