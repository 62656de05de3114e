//! Convolution forward results checked against an independent reference
//! implementation that materializes the zero-padded array and convolves it
//! with plain nested loops, plus a few frozen hand-computed outputs.

use echoview_core::graph::Graph;
use echoview_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Padding for one axis, recomputed from scratch: output length is the
/// ceiling of extent/stride and the shortfall is split low-side-first.
fn ref_pad(extent: usize, k: usize, stride: usize) -> (usize, usize, usize) {
    let out = (extent + stride - 1) / stride;
    let span = (out - 1) * stride + k;
    let total = if span > extent { span - extent } else { 0 };
    (out, total / 2, total - total / 2)
}

/// Zero-pad `[h, w, c]` by the amounts `ref_pad` reports for each axis.
fn pad_image(
    input: &[f64],
    (h, w, c): (usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let (_, top, bottom) = ref_pad(h, k, stride);
    let (_, left, right) = ref_pad(w, k, stride);
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut padded = vec![0.0; ph * pw * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                padded[((y + top) * pw + (x + left)) * c + ch] = input[(y * w + x) * c + ch];
            }
        }
    }
    (padded, ph, pw)
}

fn ref_conv2d(
    input: &[f64],
    (h, w, c_in): (usize, usize, usize),
    kernels: &[f64], // [k, k, c_in, c_out]
    k: usize,
    c_out: usize,
    stride: usize,
    bias: &[f64],
) -> Vec<f64> {
    let (padded, _, pw) = pad_image(input, (h, w, c_in), k, stride);
    let (oh, _, _) = ref_pad(h, k, stride);
    let (ow, _, _) = ref_pad(w, k, stride);
    let mut out = vec![0.0; oh * ow * c_out];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..c_out {
                let mut acc = bias[co];
                for dy in 0..k {
                    for dx in 0..k {
                        for ci in 0..c_in {
                            let pv = padded[((oy * stride + dy) * pw + ox * stride + dx) * c_in + ci];
                            let kv = kernels[((dy * k + dx) * c_in + ci) * c_out + co];
                            acc += pv * kv;
                        }
                    }
                }
                out[(oy * ow + ox) * c_out + co] = acc;
            }
        }
    }
    out
}

fn ref_depthwise(
    input: &[f64],
    (h, w, c): (usize, usize, usize),
    kernels: &[f64], // [k, k, c]
    k: usize,
    stride: usize,
    bias: &[f64],
) -> Vec<f64> {
    let (padded, _, pw) = pad_image(input, (h, w, c), k, stride);
    let (oh, _, _) = ref_pad(h, k, stride);
    let (ow, _, _) = ref_pad(w, k, stride);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = bias[ch];
                for dy in 0..k {
                    for dx in 0..k {
                        let pv = padded[((oy * stride + dy) * pw + ox * stride + dx) * c + ch];
                        acc += pv * kernels[(dy * k + dx) * c + ch];
                    }
                }
                out[(oy * ow + ox) * c + ch] = acc;
            }
        }
    }
    out
}

fn ref_pointwise(input: &[f64], pixels: usize, c_in: usize, kernels: &[f64], c_out: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; pixels * c_out];
    for p in 0..pixels {
        for co in 0..c_out {
            let mut acc = bias[co];
            for ci in 0..c_in {
                acc += input[p * c_in + ci] * kernels[ci * c_out + co];
            }
            out[p * c_out + co] = acc;
        }
    }
    out
}

fn ref_temporal(input: &[f64], steps: usize, c_in: usize, kernels: &[f64], kt: usize, c_out: usize, bias: &[f64]) -> Vec<f64> {
    let (_, before, after) = ref_pad(steps, kt, 1);
    let padded_len = steps + before + after;
    let mut padded = vec![0.0; padded_len * c_in];
    padded[before * c_in..(before + steps) * c_in].copy_from_slice(input);
    let mut out = vec![0.0; steps * c_out];
    for t in 0..steps {
        for co in 0..c_out {
            let mut acc = bias[co];
            for dt in 0..kt {
                for ci in 0..c_in {
                    acc += padded[(t + dt) * c_in + ci] * kernels[(dt * c_in + ci) * c_out + co];
                }
            }
            out[t * c_out + co] = acc;
        }
    }
    out
}

fn rand_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol * (1.0 + w.abs()),
            "{what}[{i}]: got {g}, want {w}"
        );
    }
}

#[test]
fn conv2d_matches_padded_reference() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for &(h, w, c_in, k, c_out, stride) in &[
        (5usize, 4usize, 2usize, 3usize, 3usize, 1usize),
        (5, 4, 2, 3, 3, 2),
        (8, 8, 1, 3, 4, 2),
        (7, 9, 3, 1, 2, 1),
        (6, 6, 2, 5, 2, 2),
        (1, 1, 3, 3, 2, 1),
    ] {
        let input = rand_vec(&mut rng, h * w * c_in);
        let kernels = rand_vec(&mut rng, k * k * c_in * c_out);
        let bias = rand_vec(&mut rng, c_out);
        let want = ref_conv2d(&input, (h, w, c_in), &kernels, k, c_out, stride, &bias);

        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::new(vec![h, w, c_in], input).unwrap());
        let kv = g.constant(Tensor::new(vec![k, k, c_in, c_out], kernels).unwrap());
        let bv = g.constant(Tensor::new(vec![c_out], bias).unwrap());
        let y = g.conv2d(x, kv, Some(bv), stride).unwrap();
        assert_close(
            g.value(y).data(),
            &want,
            1e-12,
            &format!("conv2d {h}x{w}x{c_in} k{k} s{stride}"),
        );
    }
}

#[test]
fn depthwise_matches_padded_reference() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    for &(h, w, c, k, stride) in &[
        (5usize, 4usize, 3usize, 3usize, 1usize),
        (5, 4, 3, 3, 2),
        (9, 7, 2, 3, 2),
        (4, 4, 1, 3, 1),
    ] {
        let input = rand_vec(&mut rng, h * w * c);
        let kernels = rand_vec(&mut rng, k * k * c);
        let bias = rand_vec(&mut rng, c);
        let want = ref_depthwise(&input, (h, w, c), &kernels, k, stride, &bias);

        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::new(vec![h, w, c], input).unwrap());
        let kv = g.constant(Tensor::new(vec![k, k, c], kernels).unwrap());
        let bv = g.constant(Tensor::new(vec![c], bias).unwrap());
        let y = g.depthwise_conv(x, kv, Some(bv), stride).unwrap();
        assert_close(
            g.value(y).data(),
            &want,
            1e-12,
            &format!("depthwise {h}x{w}x{c} k{k} s{stride}"),
        );
    }
}

#[test]
fn pointwise_matches_reference() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let (h, w, c_in, c_out) = (6, 5, 4, 7);
    let input = rand_vec(&mut rng, h * w * c_in);
    let kernels = rand_vec(&mut rng, c_in * c_out);
    let bias = rand_vec(&mut rng, c_out);
    let want = ref_pointwise(&input, h * w, c_in, &kernels, c_out, &bias);

    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(Tensor::new(vec![h, w, c_in], input).unwrap());
    let kv = g.constant(Tensor::new(vec![1, 1, c_in, c_out], kernels).unwrap());
    let bv = g.constant(Tensor::new(vec![c_out], bias).unwrap());
    let y = g.pointwise_conv(x, kv, Some(bv)).unwrap();
    assert_close(g.value(y).data(), &want, 1e-12, "pointwise");
}

#[test]
fn temporal_matches_padded_reference() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    for &(steps, c_in, kt, c_out) in &[(5usize, 3usize, 3usize, 2usize), (1, 2, 3, 2), (8, 4, 5, 1)] {
        let input = rand_vec(&mut rng, steps * c_in);
        let kernels = rand_vec(&mut rng, kt * c_in * c_out);
        let bias = rand_vec(&mut rng, c_out);
        let want = ref_temporal(&input, steps, c_in, &kernels, kt, c_out, &bias);

        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::new(vec![steps, c_in], input).unwrap());
        let kv = g.constant(Tensor::new(vec![kt, c_in, c_out], kernels).unwrap());
        let bv = g.constant(Tensor::new(vec![c_out], bias).unwrap());
        let y = g.temporal_conv(x, kv, Some(bv)).unwrap();
        assert_close(
            g.value(y).data(),
            &want,
            1e-12,
            &format!("temporal s{steps} kt{kt}"),
        );
    }
}

// Hand-computed windows: 3x3 all-ones kernel over a 4x4 all-ones image counts
// the in-bounds taps at each position.
#[test]
fn conv2d_frozen_ones_counts() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(Tensor::full(vec![4, 4, 1], 1.0));
    let kv = g.constant(Tensor::full(vec![3, 3, 1, 1], 1.0));

    let y1 = g.conv2d(x, kv, None, 1).unwrap();
    let want1 = [
        4.0, 6.0, 6.0, 4.0, //
        6.0, 9.0, 9.0, 6.0, //
        6.0, 9.0, 9.0, 6.0, //
        4.0, 6.0, 6.0, 4.0,
    ];
    assert_eq!(g.value(y1).shape(), &[4, 4, 1]);
    assert_close(g.value(y1).data(), &want1, 0.0, "stride-1 ones");

    let y2 = g.conv2d(x, kv, None, 2).unwrap();
    // Output is the ceiling of 4/2 = 2 per axis; padding lands only on the
    // high side, so windows anchor at rows/cols {0, 2}.
    let want2 = [9.0, 6.0, 6.0, 4.0];
    assert_eq!(g.value(y2).shape(), &[2, 2, 1]);
    assert_close(g.value(y2).data(), &want2, 0.0, "stride-2 ones");
}

// Odd extent, stride 2: a 5-row column image with k 3 pads one row on each
// side, so windows anchor at rows -1, 1, 3. With input [1,2,3,4,5] and a
// kernel that sums its center column, the outputs are 1+2, 2+3+4, 4+5.
#[test]
fn odd_extent_stride2_keeps_center_alignment() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(
        Tensor::from_f64_slice(vec![5, 1, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
    );
    let mut kdata = vec![0.0; 9];
    for dy in 0..3 {
        kdata[dy * 3 + 1] = 1.0; // center column (the lone real column after padding)
    }
    let kv = g.constant(Tensor::new(vec![3, 3, 1], kdata).unwrap());
    let y = g.depthwise_conv(x, kv, None, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[3, 1, 1]);
    assert_close(g.value(y).data(), &[3.0, 9.0, 9.0], 0.0, "odd stride-2");
}
