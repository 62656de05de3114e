//! Raw convolution kernels over row-major `[H, W, C]` buffers.
//!
//! All variants use "same" zero padding: the output extent is `ceil(in/stride)`
//! and the total pad `max(0, (out-1)*stride + k - in)` splits floor-half before,
//! remainder after. Inner loops keep the channel axis contiguous so they
//! autovectorize.

use rayon::prelude::*;

use crate::tensor::Scalar;

/// Same-padding geometry along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisPad {
    pub out: usize,
    pub before: usize,
}

pub fn same_pad(extent: usize, k: usize, stride: usize) -> AxisPad {
    debug_assert!(extent > 0 && k > 0 && stride > 0);
    let out = extent.div_ceil(stride);
    let span = (out - 1) * stride + k;
    let total = span.saturating_sub(extent);
    AxisPad {
        out,
        before: total / 2,
    }
}

/// Standard convolution, kernels `[k, k, c_in, c_out]`, input `[h, w, c_in]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    input: &[T],
    (h, w, c_in): (usize, usize, usize),
    kernels: &[T],
    k: usize,
    c_out: usize,
    stride: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let py = same_pad(h, k, stride);
    let px = same_pad(w, k, stride);
    let (oh, ow) = (py.out, px.out);
    debug_assert_eq!(out.len(), oh * ow * c_out);
    out.par_chunks_mut(ow * c_out)
        .enumerate()
        .for_each(|(oy, out_row)| {
            for ox in 0..ow {
                let out_px = &mut out_row[ox * c_out..(ox + 1) * c_out];
                match bias {
                    Some(b) => out_px.copy_from_slice(b),
                    None => out_px.iter_mut().for_each(|v| *v = T::zero()),
                }
                for dy in 0..k {
                    let y = (oy * stride + dy) as isize - py.before as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let x = (ox * stride + dx) as isize - px.before as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let in_px = &input[(y as usize * w + x as usize) * c_in..][..c_in];
                        let w_tap = &kernels[(dy * k + dx) * c_in * c_out..][..c_in * c_out];
                        for (ci, &v) in in_px.iter().enumerate() {
                            let w_row = &w_tap[ci * c_out..][..c_out];
                            for (o, &wv) in out_px.iter_mut().zip(w_row) {
                                *o = *o + v * wv;
                            }
                        }
                    }
                }
            }
        });
}

/// Gradient of `conv2d_fwd` w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<T: Scalar>(
    grad_out: &[T],
    (h, w, c_in): (usize, usize, usize),
    kernels: &[T],
    k: usize,
    c_out: usize,
    stride: usize,
    grad_in: &mut [T],
) {
    let py = same_pad(h, k, stride);
    let px = same_pad(w, k, stride);
    let (oh, ow) = (py.out, px.out);
    grad_in
        .par_chunks_mut(w * c_in)
        .enumerate()
        .for_each(|(y, gin_row)| {
            for x in 0..w {
                let gin_px = &mut gin_row[x * c_in..(x + 1) * c_in];
                for dy in 0..k {
                    let oy_num = y as isize + py.before as isize - dy as isize;
                    if oy_num < 0 || oy_num % stride as isize != 0 {
                        continue;
                    }
                    let oy = (oy_num / stride as isize) as usize;
                    if oy >= oh {
                        continue;
                    }
                    for dx in 0..k {
                        let ox_num = x as isize + px.before as isize - dx as isize;
                        if ox_num < 0 || ox_num % stride as isize != 0 {
                            continue;
                        }
                        let ox = (ox_num / stride as isize) as usize;
                        if ox >= ow {
                            continue;
                        }
                        let gout_px = &grad_out[(oy * ow + ox) * c_out..][..c_out];
                        let w_tap = &kernels[(dy * k + dx) * c_in * c_out..][..c_in * c_out];
                        for (ci, g) in gin_px.iter_mut().enumerate() {
                            let w_row = &w_tap[ci * c_out..][..c_out];
                            let mut acc = T::zero();
                            for (&wv, &go) in w_row.iter().zip(gout_px) {
                                acc = acc + wv * go;
                            }
                            *g = *g + acc;
                        }
                    }
                }
            }
        });
}

/// Gradient of `conv2d_fwd` w.r.t. its kernels (accumulates into `grad_k`).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_kernels<T: Scalar>(
    input: &[T],
    (h, w, c_in): (usize, usize, usize),
    grad_out: &[T],
    k: usize,
    c_out: usize,
    stride: usize,
    grad_k: &mut [T],
) {
    let py = same_pad(h, k, stride);
    let px = same_pad(w, k, stride);
    let (oh, ow) = (py.out, px.out);
    // One tap row `[c_in, c_out]` per (dy, dx); disjoint chunks parallelize.
    grad_k
        .par_chunks_mut(c_in * c_out)
        .enumerate()
        .for_each(|(tap, gk_tap)| {
            let (dy, dx) = (tap / k, tap % k);
            for oy in 0..oh {
                let y = (oy * stride + dy) as isize - py.before as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for ox in 0..ow {
                    let x = (ox * stride + dx) as isize - px.before as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let in_px = &input[(y as usize * w + x as usize) * c_in..][..c_in];
                    let gout_px = &grad_out[(oy * ow + ox) * c_out..][..c_out];
                    for (ci, &v) in in_px.iter().enumerate() {
                        let gk_row = &mut gk_tap[ci * c_out..][..c_out];
                        for (g, &go) in gk_row.iter_mut().zip(gout_px) {
                            *g = *g + v * go;
                        }
                    }
                }
            }
        });
}

/// Depthwise convolution, kernels `[k, k, c]`, one filter per channel.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_fwd<T: Scalar>(
    input: &[T],
    (h, w, c): (usize, usize, usize),
    kernels: &[T],
    k: usize,
    stride: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let py = same_pad(h, k, stride);
    let px = same_pad(w, k, stride);
    let (_, ow) = (py.out, px.out);
    out.par_chunks_mut(ow * c).enumerate().for_each(|(oy, out_row)| {
        for ox in 0..ow {
            let out_px = &mut out_row[ox * c..(ox + 1) * c];
            match bias {
                Some(b) => out_px.copy_from_slice(b),
                None => out_px.iter_mut().for_each(|v| *v = T::zero()),
            }
            for dy in 0..k {
                let y = (oy * stride + dy) as isize - py.before as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let x = (ox * stride + dx) as isize - px.before as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let in_px = &input[(y as usize * w + x as usize) * c..][..c];
                    let w_tap = &kernels[(dy * k + dx) * c..][..c];
                    for ((o, &v), &wv) in out_px.iter_mut().zip(in_px).zip(w_tap) {
                        *o = *o + v * wv;
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_bwd_input<T: Scalar>(
    grad_out: &[T],
    (h, w, c): (usize, usize, usize),
    kernels: &[T],
    k: usize,
    stride: usize,
    grad_in: &mut [T],
) {
    let py = same_pad(h, k, stride);
    let px = same_pad(w, k, stride);
    let (oh, ow) = (py.out, px.out);
    grad_in
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, gin_row)| {
            for x in 0..w {
                let gin_px = &mut gin_row[x * c..(x + 1) * c];
                for dy in 0..k {
                    let oy_num = y as isize + py.before as isize - dy as isize;
                    if oy_num < 0 || oy_num % stride as isize != 0 {
                        continue;
                    }
                    let oy = (oy_num / stride as isize) as usize;
                    if oy >= oh {
                        continue;
                    }
                    for dx in 0..k {
                        let ox_num = x as isize + px.before as isize - dx as isize;
                        if ox_num < 0 || ox_num % stride as isize != 0 {
                            continue;
                        }
                        let ox = (ox_num / stride as isize) as usize;
                        if ox >= ow {
                            continue;
                        }
                        let gout_px = &grad_out[(oy * ow + ox) * c..][..c];
                        let w_tap = &kernels[(dy * k + dx) * c..][..c];
                        for ((g, &wv), &go) in gin_px.iter_mut().zip(w_tap).zip(gout_px) {
                            *g = *g + wv * go;
                        }
                    }
                }
            }
        });
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_bwd_kernels<T: Scalar>(
    input: &[T],
    (h, w, c): (usize, usize, usize),
    grad_out: &[T],
    k: usize,
    stride: usize,
    grad_k: &mut [T],
) {
    let py = same_pad(h, k, stride);
    let px = same_pad(w, k, stride);
    let (oh, ow) = (py.out, px.out);
    grad_k.par_chunks_mut(c).enumerate().for_each(|(tap, gk_tap)| {
        let (dy, dx) = (tap / k, tap % k);
        for oy in 0..oh {
            let y = (oy * stride + dy) as isize - py.before as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let x = (ox * stride + dx) as isize - px.before as isize;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let in_px = &input[(y as usize * w + x as usize) * c..][..c];
                let gout_px = &grad_out[(oy * ow + ox) * c..][..c];
                for ((g, &v), &go) in gk_tap.iter_mut().zip(in_px).zip(gout_px) {
                    *g = *g + v * go;
                }
            }
        }
    });
}

/// Pointwise (1x1) convolution: per-pixel `[c_in] x [c_in, c_out]` product.
pub fn pointwise_fwd<T: Scalar>(
    input: &[T],
    pixels: usize,
    c_in: usize,
    kernels: &[T],
    c_out: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    out.par_chunks_mut(c_out)
        .zip(input.par_chunks(c_in))
        .for_each(|(out_px, in_px)| {
            match bias {
                Some(b) => out_px.copy_from_slice(b),
                None => out_px.iter_mut().for_each(|v| *v = T::zero()),
            }
            for (ci, &v) in in_px.iter().enumerate() {
                let w_row = &kernels[ci * c_out..][..c_out];
                for (o, &wv) in out_px.iter_mut().zip(w_row) {
                    *o = *o + v * wv;
                }
            }
        });
    debug_assert_eq!(out.len(), pixels * c_out);
}

pub fn pointwise_bwd_input<T: Scalar>(
    grad_out: &[T],
    c_in: usize,
    kernels: &[T],
    c_out: usize,
    grad_in: &mut [T],
) {
    grad_in
        .par_chunks_mut(c_in)
        .zip(grad_out.par_chunks(c_out))
        .for_each(|(gin_px, gout_px)| {
            for (ci, g) in gin_px.iter_mut().enumerate() {
                let w_row = &kernels[ci * c_out..][..c_out];
                let mut acc = T::zero();
                for (&wv, &go) in w_row.iter().zip(gout_px) {
                    acc = acc + wv * go;
                }
                *g = *g + acc;
            }
        });
}

pub fn pointwise_bwd_kernels<T: Scalar>(
    input: &[T],
    c_in: usize,
    grad_out: &[T],
    c_out: usize,
    grad_k: &mut [T],
) {
    // Sequential over pixels: kernel grads are a shared accumulator.
    for (in_px, gout_px) in input.chunks(c_in).zip(grad_out.chunks(c_out)) {
        for (ci, &v) in in_px.iter().enumerate() {
            let gk_row = &mut grad_k[ci * c_out..][..c_out];
            for (g, &go) in gk_row.iter_mut().zip(gout_px) {
                *g = *g + v * go;
            }
        }
    }
}

/// Per-output-channel bias gradient: sums `grad_out` over all pixels.
pub fn bias_grad<T: Scalar>(grad_out: &[T], c_out: usize, grad_b: &mut [T]) {
    for gout_px in grad_out.chunks(c_out) {
        for (g, &go) in grad_b.iter_mut().zip(gout_px) {
            *g = *g + go;
        }
    }
}

/// Temporal convolution over `[steps, c_in]`, kernels `[kt, c_in, c_out]`,
/// stride 1, same padding along the step axis.
pub fn temporal_fwd<T: Scalar>(
    input: &[T],
    steps: usize,
    c_in: usize,
    kernels: &[T],
    kt: usize,
    c_out: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let p = same_pad(steps, kt, 1);
    for t in 0..steps {
        let out_px = &mut out[t * c_out..(t + 1) * c_out];
        match bias {
            Some(b) => out_px.copy_from_slice(b),
            None => out_px.iter_mut().for_each(|v| *v = T::zero()),
        }
        for dt in 0..kt {
            let s = (t + dt) as isize - p.before as isize;
            if s < 0 || s >= steps as isize {
                continue;
            }
            let in_px = &input[s as usize * c_in..][..c_in];
            let w_tap = &kernels[dt * c_in * c_out..][..c_in * c_out];
            for (ci, &v) in in_px.iter().enumerate() {
                let w_row = &w_tap[ci * c_out..][..c_out];
                for (o, &wv) in out_px.iter_mut().zip(w_row) {
                    *o = *o + v * wv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn temporal_bwd_input<T: Scalar>(
    grad_out: &[T],
    steps: usize,
    c_in: usize,
    kernels: &[T],
    kt: usize,
    c_out: usize,
    grad_in: &mut [T],
) {
    let p = same_pad(steps, kt, 1);
    for t in 0..steps {
        let gout_px = &grad_out[t * c_out..][..c_out];
        for dt in 0..kt {
            let s = (t + dt) as isize - p.before as isize;
            if s < 0 || s >= steps as isize {
                continue;
            }
            let gin_px = &mut grad_in[s as usize * c_in..][..c_in];
            let w_tap = &kernels[dt * c_in * c_out..][..c_in * c_out];
            for (ci, g) in gin_px.iter_mut().enumerate() {
                let w_row = &w_tap[ci * c_out..][..c_out];
                let mut acc = T::zero();
                for (&wv, &go) in w_row.iter().zip(gout_px) {
                    acc = acc + wv * go;
                }
                *g = *g + acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn temporal_bwd_kernels<T: Scalar>(
    input: &[T],
    steps: usize,
    c_in: usize,
    grad_out: &[T],
    kt: usize,
    c_out: usize,
    grad_k: &mut [T],
) {
    let p = same_pad(steps, kt, 1);
    for t in 0..steps {
        let gout_px = &grad_out[t * c_out..][..c_out];
        for dt in 0..kt {
            let s = (t + dt) as isize - p.before as isize;
            if s < 0 || s >= steps as isize {
                continue;
            }
            let in_px = &input[s as usize * c_in..][..c_in];
            let gk_tap = &mut grad_k[dt * c_in * c_out..][..c_in * c_out];
            for (ci, &v) in in_px.iter().enumerate() {
                let gk_row = &mut gk_tap[ci * c_out..][..c_out];
                for (g, &go) in gk_row.iter_mut().zip(gout_px) {
                    *g = *g + v * go;
                }
            }
        }
    }
}

/// `C = A x B` with `A [m, kk]`, `B [kk, n]` (or `B [n, kk]` when `b_t`).
pub fn matmul<T: Scalar>(
    a: &[T],
    (m, kk): (usize, usize),
    b: &[T],
    n: usize,
    b_t: bool,
    out: &mut [T],
) {
    assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
        out_row.iter_mut().for_each(|v| *v = T::zero());
        let a_row = &a[i * kk..][..kk];
        if b_t {
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * kk..][..kk];
                let mut acc = T::zero();
                for (&av, &bv) in a_row.iter().zip(b_row) {
                    acc = acc + av * bv;
                }
                *o = acc;
            }
        } else {
            for (l, &av) in a_row.iter().enumerate() {
                let b_row = &b[l * n..][..n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
    });
}

/// Accumulating variant of [`matmul`]: `out += A x B` (or `A x B^T`).
pub fn matmul_acc<T: Scalar>(
    a: &[T],
    (m, kk): (usize, usize),
    b: &[T],
    n: usize,
    b_t: bool,
    out: &mut [T],
) {
    for i in 0..m {
        let out_row = &mut out[i * n..][..n];
        let a_row = &a[i * kk..][..kk];
        if b_t {
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * kk..][..kk];
                let mut acc = T::zero();
                for (&av, &bv) in a_row.iter().zip(b_row) {
                    acc = acc + av * bv;
                }
                *o = *o + acc;
            }
        } else {
            for (l, &av) in a_row.iter().enumerate() {
                let b_row = &b[l * n..][..n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
    }
}

/// `out += A^T x C` with `A [m, kk]`, `C [m, n]`, `out [kk, n]`.
pub fn matmul_acc_ta<T: Scalar>(a: &[T], (m, kk): (usize, usize), c: &[T], n: usize, out: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * kk..][..kk];
        let c_row = &c[i * n..][..n];
        for (l, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[l * n..][..n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o = *o + av * cv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_pad_matches_known_cases() {
        // k=3 s=1: pad 1 before, extent preserved.
        assert_eq!(same_pad(64, 3, 1), AxisPad { out: 64, before: 1 });
        // k=3 s=2 even extent: out = extent/2, pad 0 before / 1 after.
        assert_eq!(same_pad(128, 3, 2), AxisPad { out: 64, before: 0 });
        // Odd extent, stride 2.
        assert_eq!(same_pad(5, 3, 2), AxisPad { out: 3, before: 1 });
        // 1x1 kernel never pads.
        assert_eq!(same_pad(17, 1, 1), AxisPad { out: 17, before: 0 });
    }

    #[test]
    fn pointwise_identity_kernel_passes_through() {
        let c = 3;
        let input: Vec<f64> = (0..2 * c).map(|v| v as f64 * 0.5).collect();
        let mut kernels = vec![0.0; c * c];
        for i in 0..c {
            kernels[i * c + i] = 1.0;
        }
        let mut out = vec![0.0; input.len()];
        pointwise_fwd(&input, 2, c, &kernels, c, None, &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn depthwise_delta_kernel_is_identity_in_interior() {
        let (h, w, c) = (4, 4, 2);
        let input: Vec<f64> = (0..h * w * c).map(|v| (v as f64).sin()).collect();
        // Kernel: 1 at center tap, 0 elsewhere.
        let mut kernels = vec![0.0; 9 * c];
        for ch in 0..c {
            kernels[(1 * 3 + 1) * c + ch] = 1.0;
        }
        let mut out = vec![0.0; h * w * c];
        depthwise_fwd(&input, (h, w, c), &kernels, 3, 1, None, &mut out);
        assert_eq!(out, input); // center-tap delta reproduces input everywhere
    }

    #[test]
    fn matmul_transposed_agrees_with_plain() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.25).collect(); // 3x4
        let mut c_plain = vec![0.0; 8];
        matmul(&a, (2, 3), &b, 4, false, &mut c_plain);
        // Transpose b into 4x3 and use b_t.
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c_t = vec![0.0; 8];
        matmul(&a, (2, 3), &bt, 4, true, &mut c_t);
        assert_eq!(c_plain, c_t);
    }
}
