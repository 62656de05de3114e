//! Operation constructors (eager forward) and the reverse-pass dispatcher.

use super::conv;
use super::{Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{ordered_sum, Scalar, Tensor};

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return shape_err(format!("{what} wants rank-3 [h, w, c], got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2]))
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        shape_err(format!("stride must be 1 or 2, got {stride}"))
    }
}

impl<T: Scalar> Graph<T> {
    fn bias_slice(&self, bias: Option<Var>, c_out: usize, what: &str) -> Result<()> {
        if let Some(b) = bias {
            let s = self.values[b.0].shape();
            if s != [c_out] {
                return shape_err(format!("{what} bias wants [{c_out}], got {s:?}"));
            }
        }
        Ok(())
    }

    /// Standard convolution: input `[h, w, c_in]`, kernels `[k, k, c_in, c_out]`,
    /// same padding, stride 1 or 2.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        check_stride(stride)?;
        let (h, w, c_in) = dims3(self.values[input.0].shape(), "conv2d input")?;
        let ks = self.values[kernels.0].shape().to_vec();
        if ks.len() != 4 || ks[0] != ks[1] || ks[2] != c_in {
            return shape_err(format!(
                "conv2d kernels want [k, k, {c_in}, c_out], got {ks:?}"
            ));
        }
        let (k, c_out) = (ks[0], ks[3]);
        self.bias_slice(bias, c_out, "conv2d")?;
        let oh = conv::same_pad(h, k, stride).out;
        let ow = conv::same_pad(w, k, stride).out;
        let mut out = Tensor::zeros(vec![oh, ow, c_out]);
        conv::conv2d_fwd(
            self.values[input.0].data(),
            (h, w, c_in),
            self.values[kernels.0].data(),
            k,
            c_out,
            stride,
            bias.map(|b| self.values[b.0].data()),
            out.data_mut(),
        );
        let mut parents = vec![input, kernels];
        parents.extend(bias);
        let req = self.any_requires(&parents);
        Ok(self.push(out, Op::Conv2d { input, kernels, bias, stride }, req))
    }

    /// Depthwise convolution: input `[h, w, c]`, kernels `[k, k, c]`.
    pub fn depthwise_conv(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        check_stride(stride)?;
        let (h, w, c) = dims3(self.values[input.0].shape(), "depthwise input")?;
        let ks = self.values[kernels.0].shape().to_vec();
        if ks.len() != 3 || ks[0] != ks[1] || ks[2] != c {
            return shape_err(format!("depthwise kernels want [k, k, {c}], got {ks:?}"));
        }
        let k = ks[0];
        self.bias_slice(bias, c, "depthwise")?;
        let oh = conv::same_pad(h, k, stride).out;
        let ow = conv::same_pad(w, k, stride).out;
        let mut out = Tensor::zeros(vec![oh, ow, c]);
        conv::depthwise_fwd(
            self.values[input.0].data(),
            (h, w, c),
            self.values[kernels.0].data(),
            k,
            stride,
            bias.map(|b| self.values[b.0].data()),
            out.data_mut(),
        );
        let mut parents = vec![input, kernels];
        parents.extend(bias);
        let req = self.any_requires(&parents);
        Ok(self.push(out, Op::DepthwiseConv { input, kernels, bias, stride }, req))
    }

    /// Pointwise (1x1) convolution: input `[h, w, c_in]`, kernels `[1, 1, c_in, c_out]`.
    pub fn pointwise_conv(&mut self, input: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let (h, w, c_in) = dims3(self.values[input.0].shape(), "pointwise input")?;
        let ks = self.values[kernels.0].shape().to_vec();
        if ks.len() != 4 || ks[0] != 1 || ks[1] != 1 || ks[2] != c_in {
            return shape_err(format!(
                "pointwise kernels want [1, 1, {c_in}, c_out], got {ks:?}"
            ));
        }
        let c_out = ks[3];
        self.bias_slice(bias, c_out, "pointwise")?;
        let mut out = Tensor::zeros(vec![h, w, c_out]);
        conv::pointwise_fwd(
            self.values[input.0].data(),
            h * w,
            c_in,
            self.values[kernels.0].data(),
            c_out,
            bias.map(|b| self.values[b.0].data()),
            out.data_mut(),
        );
        let mut parents = vec![input, kernels];
        parents.extend(bias);
        let req = self.any_requires(&parents);
        Ok(self.push(out, Op::PointwiseConv { input, kernels, bias }, req))
    }

    /// Temporal convolution over `[steps, c_in]` with kernels `[kt, c_in, c_out]`,
    /// stride 1, same padding along the step axis.
    pub fn temporal_conv(&mut self, input: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let s = self.values[input.0].shape().to_vec();
        if s.len() != 2 {
            return shape_err(format!("temporal input wants [steps, c_in], got {s:?}"));
        }
        let (steps, c_in) = (s[0], s[1]);
        let ks = self.values[kernels.0].shape().to_vec();
        if ks.len() != 3 || ks[1] != c_in {
            return shape_err(format!(
                "temporal kernels want [kt, {c_in}, c_out], got {ks:?}"
            ));
        }
        let (kt, c_out) = (ks[0], ks[2]);
        self.bias_slice(bias, c_out, "temporal conv")?;
        let mut out = Tensor::zeros(vec![steps, c_out]);
        conv::temporal_fwd(
            self.values[input.0].data(),
            steps,
            c_in,
            self.values[kernels.0].data(),
            kt,
            c_out,
            bias.map(|b| self.values[b.0].data()),
            out.data_mut(),
        );
        let mut parents = vec![input, kernels];
        parents.extend(bias);
        let req = self.any_requires(&parents);
        Ok(self.push(out, Op::TemporalConv { input, kernels, bias }, req))
    }

    /// Dense layer: input `[n_in]`, weights `[n_out, n_in]`, bias `[n_out]`.
    pub fn fully_connected(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.values[input.0].shape().to_vec();
        let ws = self.values[weights.0].shape().to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return shape_err(format!(
                "fully_connected wants x [n_in], w [n_out, n_in]; got {xs:?} / {ws:?}"
            ));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        self.bias_slice(bias, n_out, "fully_connected")?;
        let mut out = Tensor::zeros(vec![n_out]);
        {
            use rayon::prelude::*;
            let x = self.values[input.0].data();
            let w = self.values[weights.0].data();
            let b = bias.map(|b| self.values[b.0].data());
            out.data_mut()
                .par_iter_mut()
                .enumerate()
                .for_each(|(o, y)| {
                    let w_row = &w[o * n_in..][..n_in];
                    let mut acc = match b {
                        Some(b) => b[o],
                        None => T::zero(),
                    };
                    for (&wv, &xv) in w_row.iter().zip(x) {
                        acc = acc + wv * xv;
                    }
                    *y = acc;
                });
        }
        let mut parents = vec![input, weights];
        parents.extend(bias);
        let req = self.any_requires(&parents);
        Ok(self.push(out, Op::FullyConnected { input, weights, bias }, req))
    }

    /// `A [m, k] x B [k, n]` (or `B [n, k]` via [`Graph::matmul_nt`]).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `A [m, k] x B^T` with `B` stored `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let sa = self.values[a.0].shape().to_vec();
        let sb = self.values[b.0].shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!("matmul wants rank-2 operands, got {sa:?} / {sb:?}"));
        }
        let (m, kk) = (sa[0], sa[1]);
        let n = if b_transposed {
            if sb[1] != kk {
                return shape_err(format!("matmul_nt wants B [n, {kk}], got {sb:?}"));
            }
            sb[0]
        } else {
            if sb[0] != kk {
                return shape_err(format!("matmul wants B [{kk}, n], got {sb:?}"));
            }
            sb[1]
        };
        let mut out = Tensor::zeros(vec![m, n]);
        conv::matmul(
            self.values[a.0].data(),
            (m, kk),
            self.values[b.0].data(),
            n,
            b_transposed,
            out.data_mut(),
        );
        let req = self.any_requires(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, b_transposed }, req))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let mut out = self.values[input.0].clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let req = self.metas[input.0].requires_grad;
        self.push(out, Op::Relu { input }, req)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let mut out = self.values[input.0].clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        let req = self.metas[input.0].requires_grad;
        self.push(out, Op::Tanh { input }, req)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let mut out = self.values[input.0].clone();
        for v in out.data_mut() {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        let req = self.metas[input.0].requires_grad;
        self.push(out, Op::Sigmoid { input }, req)
    }

    /// Numerically stable softmax over a rank-1 tensor. The normalizer is an
    /// order-insensitive sum, so permuting the entries permutes the outputs
    /// bitwise-exactly.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let s = self.values[input.0].shape();
        if s.len() != 1 || s[0] == 0 {
            return shape_err(format!("softmax wants non-empty rank-1 input, got {s:?}"));
        }
        let x = self.values[input.0].data();
        let mut m = x[0];
        for &v in x {
            if v > m {
                m = v;
            }
        }
        let mut exps: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
        let mut scratch = exps.clone();
        let denom = ordered_sum(&mut scratch);
        for v in &mut exps {
            *v = *v / denom;
        }
        let out = Tensor::new(s.to_vec(), exps)?;
        let req = self.metas[input.0].requires_grad;
        Ok(self.push(out, Op::Softmax { input }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return shape_err(format!(
                "add wants matching shapes, got {:?} / {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            ));
        }
        let mut out = self.values[a.0].clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o = *o + bv;
        }
        let req = self.any_requires(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return shape_err(format!(
                "mul wants matching shapes, got {:?} / {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            ));
        }
        let mut out = self.values[a.0].clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o = *o * bv;
        }
        let req = self.any_requires(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, req))
    }

    /// Multiply by a compile-time-known constant (e.g. 1/K, loss weights).
    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let mut out = self.values[input.0].clone();
        for v in out.data_mut() {
            *v = *v * f;
        }
        let req = self.metas[input.0].requires_grad;
        self.push(out, Op::Scale { input, factor }, req)
    }

    /// Elementwise `w * x + b` with learned scalars `w`, `b` (shape `[1]`).
    pub fn scalar_affine(&mut self, input: Var, w: Var, b: Var) -> Result<Var> {
        for (v, name) in [(w, "w"), (b, "b")] {
            if self.values[v.0].shape() != [1] {
                return shape_err(format!(
                    "scalar_affine {name} wants shape [1], got {:?}",
                    self.values[v.0].shape()
                ));
            }
        }
        let wv = self.values[w.0].data()[0];
        let bv = self.values[b.0].data()[0];
        let mut out = self.values[input.0].clone();
        for v in out.data_mut() {
            *v = wv * *v + bv;
        }
        let req = self.any_requires(&[input, w, b]);
        Ok(self.push(out, Op::ScalarAffine { input, w, b }, req))
    }

    /// Scale the trailing axis: input `[..., d]` times `scale [d]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let ss = self.values[scale.0].shape().to_vec();
        let is = self.values[input.0].shape().to_vec();
        if ss.len() != 1 || is.last() != Some(&ss[0]) {
            return shape_err(format!(
                "channel_scale wants input [..., d] and scale [d]; got {is:?} / {ss:?}"
            ));
        }
        let d = ss[0];
        let mut out = self.values[input.0].clone();
        let sdata = self.values[scale.0].data();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &sv) in row.iter_mut().zip(sdata) {
                *o = *o * sv;
            }
        }
        let req = self.any_requires(&[input, scale]);
        Ok(self.push(out, Op::ChannelScale { input, scale }, req))
    }

    /// Concatenate rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat wants at least one part");
        }
        let mut data = Vec::new();
        for p in parts {
            let t = &self.values[p.0];
            if t.shape().len() != 1 {
                return shape_err(format!(
                    "concat wants rank-1 parts, got {:?}",
                    t.shape()
                ));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![data.len()], data)?;
        let req = self.any_requires(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, req))
    }

    /// Contiguous slice of a rank-1 tensor.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.values[input.0].shape();
        if s.len() != 1 || start + len > s[0] {
            return shape_err(format!(
                "slice [{start}, {start}+{len}) out of range for {s:?}"
            ));
        }
        let data = self.values[input.0].data()[start..start + len].to_vec();
        let out = Tensor::new(vec![len], data)?;
        let req = self.metas[input.0].requires_grad;
        Ok(self.push(out, Op::Slice { input, start, len }, req))
    }

    /// Stack equally-shaped tensors along a new leading axis: K x `[d...]` -> `[K, d...]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("stack wants at least one part");
        }
        let first = self.values[parts[0].0].shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.values[parts[0].0].numel());
        for p in parts {
            if self.values[p.0].shape() != first.as_slice() {
                return shape_err(format!(
                    "stack wants equal shapes; got {:?} vs {:?}",
                    self.values[p.0].shape(),
                    first
                ));
            }
            data.extend_from_slice(self.values[p.0].data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first);
        let out = Tensor::new(shape, data)?;
        let req = self.any_requires(parts);
        Ok(self.push(out, Op::Stack { parts: parts.to_vec() }, req))
    }

    /// Elementwise average over the leading axis (`[K, d...]` -> `[d...]`).
    /// Order-insensitive: permuting the K slices leaves the result bitwise equal.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.values[input.0].shape().to_vec();
        if s.len() < 2 || s[0] == 0 {
            return shape_err(format!("global_average_pool wants [K, d...], got {s:?}"));
        }
        let k = s[0];
        let d: usize = s[1..].iter().product();
        let x = self.values[input.0].data();
        let recip = T::from_f64(1.0 / k as f64);
        let mut out_data = vec![T::zero(); d];
        let mut buf = vec![T::zero(); k];
        for (dd, o) in out_data.iter_mut().enumerate() {
            for t in 0..k {
                buf[t] = x[t * d + dd];
            }
            *o = ordered_sum(&mut buf) * recip;
        }
        let out = Tensor::new(s[1..].to_vec(), out_data)?;
        let req = self.metas[input.0].requires_grad;
        Ok(self.push(out, Op::FrameMean { input, frames: k }, req))
    }

    /// `sum_k w[k] * frames[k, :]` with an order-insensitive sum over k.
    /// No 1/K factor; compose with [`Graph::scale`] where needed.
    pub fn weighted_frame_sum(&mut self, weights: Var, frames: Var) -> Result<Var> {
        let ws = self.values[weights.0].shape().to_vec();
        let fs = self.values[frames.0].shape().to_vec();
        if ws.len() != 1 || fs.len() < 2 || ws[0] != fs[0] {
            return shape_err(format!(
                "weighted_frame_sum wants w [K] and frames [K, d...]; got {ws:?} / {fs:?}"
            ));
        }
        let k = ws[0];
        let d: usize = fs[1..].iter().product();
        let w = self.values[weights.0].data();
        let f = self.values[frames.0].data();
        let mut out_data = vec![T::zero(); d];
        let mut buf = vec![T::zero(); k];
        for (dd, o) in out_data.iter_mut().enumerate() {
            for t in 0..k {
                buf[t] = w[t] * f[t * d + dd];
            }
            *o = ordered_sum(&mut buf);
        }
        let out = Tensor::new(fs[1..].to_vec(), out_data)?;
        let req = self.any_requires(&[weights, frames]);
        Ok(self.push(out, Op::WeightedFrameSum { weights, frames }, req))
    }

    /// Row-wise softmax over an `[n, n]` similarity matrix whose positions
    /// group into `frames` equal blocks. The diagonal is excluded when
    /// `exclude_diag` (a row left with no admissible entries becomes zeros).
    /// Row normalizers combine per-frame partial sums order-insensitively, so
    /// permuting frame blocks permutes the output bitwise-exactly.
    pub fn nonlocal_row_softmax(
        &mut self,
        scores: Var,
        frames: usize,
        exclude_diag: bool,
    ) -> Result<Var> {
        let s = self.values[scores.0].shape().to_vec();
        if s.len() != 2 || s[0] != s[1] || frames == 0 || s[0] % frames != 0 {
            return shape_err(format!(
                "nonlocal_row_softmax wants square [n, n] with n divisible by frames={frames}, got {s:?}"
            ));
        }
        let n = s[0];
        let spatial = n / frames;
        let x = self.values[scores.0].data();
        let mut out_data = vec![T::zero(); n * n];
        let mut partials = vec![T::zero(); frames];
        for i in 0..n {
            let row = &x[i * n..][..n];
            let out_row = &mut out_data[i * n..][..n];
            // Max over admissible entries (order-independent).
            let mut m: Option<T> = None;
            for (j, &v) in row.iter().enumerate() {
                if exclude_diag && j == i {
                    continue;
                }
                m = Some(match m {
                    Some(cur) if cur >= v => cur,
                    _ => v,
                });
            }
            let m = match m {
                Some(m) => m,
                None => continue, // single excluded position: row stays zero
            };
            for (t, p) in partials.iter_mut().enumerate() {
                let mut acc = T::zero();
                for j in t * spatial..(t + 1) * spatial {
                    if exclude_diag && j == i {
                        continue;
                    }
                    let e = (row[j] - m).exp();
                    out_row[j] = e;
                    acc = acc + e;
                }
                *p = acc;
            }
            let mut scratch = partials.clone();
            let denom = ordered_sum(&mut scratch);
            for (j, o) in out_row.iter_mut().enumerate() {
                if exclude_diag && j == i {
                    *o = T::zero();
                } else {
                    *o = *o / denom;
                }
            }
        }
        let out = Tensor::new(vec![n, n], out_data)?;
        let req = self.metas[scores.0].requires_grad;
        Ok(self.push(out, Op::NonlocalRowSoftmax { scores }, req))
    }

    /// `out[i, :] = sum_j attn[i, j] * values[j, :]`, combining per-frame
    /// partial sums order-insensitively over the `frames` blocks of j.
    pub fn framewise_matmul(&mut self, attn: Var, values: Var, frames: usize) -> Result<Var> {
        let sa = self.values[attn.0].shape().to_vec();
        let sv = self.values[values.0].shape().to_vec();
        if sa.len() != 2
            || sa[0] != sa[1]
            || sv.len() != 2
            || sv[0] != sa[0]
            || frames == 0
            || sa[0] % frames != 0
        {
            return shape_err(format!(
                "framewise_matmul wants attn [n, n], values [n, d], n divisible by frames={frames}; got {sa:?} / {sv:?}"
            ));
        }
        let (n, d) = (sv[0], sv[1]);
        let spatial = n / frames;
        let a = self.values[attn.0].data();
        let v = self.values[values.0].data();
        let mut out_data = vec![T::zero(); n * d];
        let mut partials = vec![T::zero(); frames * d];
        let mut buf = vec![T::zero(); frames];
        for i in 0..n {
            let a_row = &a[i * n..][..n];
            partials.iter_mut().for_each(|p| *p = T::zero());
            for t in 0..frames {
                let part = &mut partials[t * d..][..d];
                for j in t * spatial..(t + 1) * spatial {
                    let av = a_row[j];
                    let v_row = &v[j * d..][..d];
                    for (p, &vv) in part.iter_mut().zip(v_row) {
                        *p = *p + av * vv;
                    }
                }
            }
            let out_row = &mut out_data[i * d..][..d];
            for (dd, o) in out_row.iter_mut().enumerate() {
                for t in 0..frames {
                    buf[t] = partials[t * d + dd];
                }
                *o = ordered_sum(&mut buf);
            }
        }
        let out = Tensor::new(vec![n, d], out_data)?;
        let req = self.any_requires(&[attn, values]);
        Ok(self.push(out, Op::FramewiseMatmul { attn, values }, req))
    }

    /// Copy into a new shape with identical element count.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.values[input.0].clone().reshaped(shape)?;
        let req = self.metas[input.0].requires_grad;
        Ok(self.push(out, Op::Reshape { input }, req))
    }

    /// Flatten to rank 1.
    pub fn flatten(&mut self, input: Var) -> Var {
        let n = self.values[input.0].numel();
        self.reshape(input, vec![n]).expect("flatten cannot fail")
    }

    /// Sum of all elements -> scalar `[1]`.
    pub fn sum(&mut self, input: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.values[input.0].data() {
            acc = acc + v;
        }
        let req = self.metas[input.0].requires_grad;
        self.push(Tensor::scalar(acc), Op::Sum { input }, req)
    }

    /// Sum of squared differences against a constant target.
    pub fn l2_loss(&mut self, input: Var, target: Tensor<T>) -> Result<Var> {
        if target.shape() != self.values[input.0].shape() {
            return shape_err(format!(
                "l2_loss target shape {:?} != input {:?}",
                target.shape(),
                self.values[input.0].shape()
            ));
        }
        let mut sq: Vec<T> = self.values[input.0]
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| (x - t) * (x - t))
            .collect();
        let loss = ordered_sum(&mut sq);
        let req = self.metas[input.0].requires_grad;
        Ok(self.push(Tensor::scalar(loss), Op::L2Loss { input, target }, req))
    }

    /// Sigmoid cross-entropy on a raw logit `[1]` against a 0/1 label,
    /// computed in the stable softplus form.
    pub fn bce_with_logit(&mut self, logit: Var, label: f64) -> Result<Var> {
        if self.values[logit.0].shape() != [1] {
            return shape_err(format!(
                "bce_with_logit wants logit [1], got {:?}",
                self.values[logit.0].shape()
            ));
        }
        if label != 0.0 && label != 1.0 {
            return shape_err(format!("bce label must be 0 or 1, got {label}"));
        }
        let z = self.values[logit.0].data()[0];
        let y = T::from_f64(label);
        let loss = z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        let req = self.metas[logit.0].requires_grad;
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogit { logit, label }, req))
    }

    /// Softmax cross-entropy on raw logits `[c]` against a class index.
    pub fn ce_with_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        let s = self.values[logits.0].shape();
        if s.len() != 1 || label >= s[0] {
            return shape_err(format!(
                "ce_with_logits wants logits [c] and label < c; got {s:?}, label {label}"
            ));
        }
        let x = self.values[logits.0].data();
        let mut m = x[0];
        for &v in x {
            if v > m {
                m = v;
            }
        }
        let mut acc = T::zero();
        for &v in x {
            acc = acc + (v - m).exp();
        }
        let loss = m + acc.ln() - x[label];
        let req = self.metas[logits.0].requires_grad;
        Ok(self.push(Tensor::scalar(loss), Op::CeWithLogits { logits, label }, req))
    }
}

/// Allocate-on-demand gradient buffer for node `idx`.
fn ensure<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    values: &[Tensor<T>],
    idx: usize,
) -> &'a mut [T] {
    if grads[idx].is_none() {
        grads[idx] = Some(Tensor::zeros(values[idx].shape().to_vec()));
    }
    grads[idx].as_mut().unwrap().data_mut()
}

impl<T: Scalar> Graph<T> {
    pub(super) fn backprop_node(&mut self, i: usize) {
        let gout_t = self.grads[i].take().expect("backprop wants a gradient");
        {
            let Graph { metas, values, grads, .. } = self;
            let g = gout_t.data();
            let req = |v: Var| metas[v.0].requires_grad;
            match &metas[i].op {
                Op::Leaf => {}
                Op::Conv2d { input, kernels, bias, stride } => {
                    let (h, w, c_in) = {
                        let s = values[input.0].shape();
                        (s[0], s[1], s[2])
                    };
                    let ks = values[kernels.0].shape();
                    let (k, c_out) = (ks[0], ks[3]);
                    if req(*input) {
                        let kern = values[kernels.0].data();
                        conv::conv2d_bwd_input(
                            g,
                            (h, w, c_in),
                            kern,
                            k,
                            c_out,
                            *stride,
                            ensure(grads, values, input.0),
                        );
                    }
                    if req(*kernels) {
                        conv::conv2d_bwd_kernels(
                            values[input.0].data(),
                            (h, w, c_in),
                            g,
                            k,
                            c_out,
                            *stride,
                            ensure(grads, values, kernels.0),
                        );
                    }
                    if let Some(b) = bias {
                        if req(*b) {
                            conv::bias_grad(g, c_out, ensure(grads, values, b.0));
                        }
                    }
                }
                Op::DepthwiseConv { input, kernels, bias, stride } => {
                    let (h, w, c) = {
                        let s = values[input.0].shape();
                        (s[0], s[1], s[2])
                    };
                    let k = values[kernels.0].shape()[0];
                    if req(*input) {
                        let kern = values[kernels.0].data();
                        conv::depthwise_bwd_input(
                            g,
                            (h, w, c),
                            kern,
                            k,
                            *stride,
                            ensure(grads, values, input.0),
                        );
                    }
                    if req(*kernels) {
                        conv::depthwise_bwd_kernels(
                            values[input.0].data(),
                            (h, w, c),
                            g,
                            k,
                            *stride,
                            ensure(grads, values, kernels.0),
                        );
                    }
                    if let Some(b) = bias {
                        if req(*b) {
                            conv::bias_grad(g, c, ensure(grads, values, b.0));
                        }
                    }
                }
                Op::PointwiseConv { input, kernels, bias } => {
                    let (h, w, c_in) = {
                        let s = values[input.0].shape();
                        (s[0], s[1], s[2])
                    };
                    let c_out = values[kernels.0].shape()[3];
                    if req(*input) {
                        let kern = values[kernels.0].data();
                        conv::pointwise_bwd_input(
                            g,
                            c_in,
                            kern,
                            c_out,
                            ensure(grads, values, input.0),
                        );
                    }
                    if req(*kernels) {
                        conv::pointwise_bwd_kernels(
                            values[input.0].data(),
                            c_in,
                            g,
                            c_out,
                            ensure(grads, values, kernels.0),
                        );
                    }
                    if let Some(b) = bias {
                        if req(*b) {
                            conv::bias_grad(g, c_out, ensure(grads, values, b.0));
                        }
                    }
                    let _ = (h, w);
                }
                Op::TemporalConv { input, kernels, bias } => {
                    let (steps, c_in) = {
                        let s = values[input.0].shape();
                        (s[0], s[1])
                    };
                    let ks = values[kernels.0].shape();
                    let (kt, c_out) = (ks[0], ks[2]);
                    if req(*input) {
                        let kern = values[kernels.0].data();
                        conv::temporal_bwd_input(
                            g,
                            steps,
                            c_in,
                            kern,
                            kt,
                            c_out,
                            ensure(grads, values, input.0),
                        );
                    }
                    if req(*kernels) {
                        conv::temporal_bwd_kernels(
                            values[input.0].data(),
                            steps,
                            c_in,
                            g,
                            kt,
                            c_out,
                            ensure(grads, values, kernels.0),
                        );
                    }
                    if let Some(b) = bias {
                        if req(*b) {
                            conv::bias_grad(g, c_out, ensure(grads, values, b.0));
                        }
                    }
                }
                Op::FullyConnected { input, weights, bias } => {
                    let (n_out, n_in) = {
                        let s = values[weights.0].shape();
                        (s[0], s[1])
                    };
                    if req(*input) {
                        let w = values[weights.0].data();
                        let gin = ensure(grads, values, input.0);
                        for o in 0..n_out {
                            let w_row = &w[o * n_in..][..n_in];
                            let go = g[o];
                            for (gi, &wv) in gin.iter_mut().zip(w_row) {
                                *gi = *gi + wv * go;
                            }
                        }
                    }
                    if req(*weights) {
                        use rayon::prelude::*;
                        let x = values[input.0].data();
                        let gw = ensure(grads, values, weights.0);
                        gw.par_chunks_mut(n_in).enumerate().for_each(|(o, gw_row)| {
                            let go = g[o];
                            for (gi, &xv) in gw_row.iter_mut().zip(x) {
                                *gi = *gi + xv * go;
                            }
                        });
                    }
                    if let Some(b) = bias {
                        if req(*b) {
                            let gb = ensure(grads, values, b.0);
                            for (gi, &go) in gb.iter_mut().zip(g) {
                                *gi = *gi + go;
                            }
                        }
                    }
                }
                Op::MatMul { a, b, b_transposed } => {
                    let (m, kk) = {
                        let s = values[a.0].shape();
                        (s[0], s[1])
                    };
                    let n = values[i].shape()[1];
                    if *b_transposed {
                        // C = A x B^T, B stored [n, kk].
                        if req(*a) {
                            let bv = values[b.0].data();
                            conv::matmul_acc(g, (m, n), bv, kk, false, ensure(grads, values, a.0));
                        }
                        if req(*b) {
                            // dB[j, l] += sum_i g[i, j] * A[i, l]  == g^T x A
                            let av = values[a.0].data();
                            conv::matmul_acc_ta(g, (m, n), av, kk, ensure(grads, values, b.0));
                        }
                    } else {
                        if req(*a) {
                            let bv = values[b.0].data();
                            conv::matmul_acc(g, (m, n), bv, kk, true, ensure(grads, values, a.0));
                        }
                        if req(*b) {
                            let av = values[a.0].data();
                            conv::matmul_acc_ta(av, (m, kk), g, n, ensure(grads, values, b.0));
                        }
                    }
                }
                Op::Relu { input } => {
                    if req(*input) {
                        let x = values[input.0].data();
                        let gin = ensure(grads, values, input.0);
                        for ((gi, &xv), &go) in gin.iter_mut().zip(x).zip(g) {
                            if xv > T::zero() {
                                *gi = *gi + go;
                            }
                        }
                    }
                }
                Op::Tanh { input } => {
                    if req(*input) {
                        let y = values[i].data();
                        let gin = ensure(grads, values, input.0);
                        for ((gi, &yv), &go) in gin.iter_mut().zip(y).zip(g) {
                            *gi = *gi + go * (T::one() - yv * yv);
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    if req(*input) {
                        let y = values[i].data();
                        let gin = ensure(grads, values, input.0);
                        for ((gi, &yv), &go) in gin.iter_mut().zip(y).zip(g) {
                            *gi = *gi + go * yv * (T::one() - yv);
                        }
                    }
                }
                Op::Softmax { input } => {
                    if req(*input) {
                        let y = values[i].data();
                        let mut dot = T::zero();
                        for (&yv, &go) in y.iter().zip(g) {
                            dot = dot + yv * go;
                        }
                        let gin = ensure(grads, values, input.0);
                        for ((gi, &yv), &go) in gin.iter_mut().zip(y).zip(g) {
                            *gi = *gi + yv * (go - dot);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for p in [a, b] {
                        if req(*p) {
                            let gp = ensure(grads, values, p.0);
                            for (gi, &go) in gp.iter_mut().zip(g) {
                                *gi = *gi + go;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if req(*a) {
                        let bv = values[b.0].data();
                        let ga = ensure(grads, values, a.0);
                        for ((gi, &v), &go) in ga.iter_mut().zip(bv).zip(g) {
                            *gi = *gi + v * go;
                        }
                    }
                    if req(*b) {
                        let av = values[a.0].data();
                        let gb = ensure(grads, values, b.0);
                        for ((gi, &v), &go) in gb.iter_mut().zip(av).zip(g) {
                            *gi = *gi + v * go;
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    if req(*input) {
                        let f = T::from_f64(*factor);
                        let gin = ensure(grads, values, input.0);
                        for (gi, &go) in gin.iter_mut().zip(g) {
                            *gi = *gi + f * go;
                        }
                    }
                }
                Op::ScalarAffine { input, w, b } => {
                    let wv = values[w.0].data()[0];
                    if req(*input) {
                        let gin = ensure(grads, values, input.0);
                        for (gi, &go) in gin.iter_mut().zip(g) {
                            *gi = *gi + wv * go;
                        }
                    }
                    if req(*w) {
                        let x = values[input.0].data();
                        let mut acc = T::zero();
                        for (&xv, &go) in x.iter().zip(g) {
                            acc = acc + xv * go;
                        }
                        let gw = ensure(grads, values, w.0);
                        gw[0] = gw[0] + acc;
                    }
                    if req(*b) {
                        let mut acc = T::zero();
                        for &go in g {
                            acc = acc + go;
                        }
                        let gb = ensure(grads, values, b.0);
                        gb[0] = gb[0] + acc;
                    }
                }
                Op::ChannelScale { input, scale } => {
                    let d = values[scale.0].shape()[0];
                    if req(*input) {
                        let s = values[scale.0].data();
                        let gin = ensure(grads, values, input.0);
                        for (grow, gorow) in gin.chunks_mut(d).zip(g.chunks(d)) {
                            for ((gi, &sv), &go) in grow.iter_mut().zip(s).zip(gorow) {
                                *gi = *gi + sv * go;
                            }
                        }
                    }
                    if req(*scale) {
                        let x = values[input.0].data();
                        let gs = ensure(grads, values, scale.0);
                        for (xrow, gorow) in x.chunks(d).zip(g.chunks(d)) {
                            for ((gi, &xv), &go) in gs.iter_mut().zip(xrow).zip(gorow) {
                                *gi = *gi + xv * go;
                            }
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = values[p.0].numel();
                        if req(*p) {
                            let gp = ensure(grads, values, p.0);
                            for (gi, &go) in gp.iter_mut().zip(&g[offset..offset + len]) {
                                *gi = *gi + go;
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, start, len } => {
                    if req(*input) {
                        let gin = ensure(grads, values, input.0);
                        for (gi, &go) in gin[*start..*start + *len].iter_mut().zip(g) {
                            *gi = *gi + go;
                        }
                    }
                }
                Op::Stack { parts } => {
                    let d = values[parts[0].0].numel();
                    for (t, p) in parts.iter().enumerate() {
                        if req(*p) {
                            let gp = ensure(grads, values, p.0);
                            for (gi, &go) in gp.iter_mut().zip(&g[t * d..(t + 1) * d]) {
                                *gi = *gi + go;
                            }
                        }
                    }
                }
                Op::FrameMean { input, frames } => {
                    if req(*input) {
                        let d = values[i].numel();
                        let recip = T::from_f64(1.0 / *frames as f64);
                        let gin = ensure(grads, values, input.0);
                        for t in 0..*frames {
                            for (gi, &go) in gin[t * d..(t + 1) * d].iter_mut().zip(g) {
                                *gi = *gi + go * recip;
                            }
                        }
                    }
                }
                Op::WeightedFrameSum { weights, frames } => {
                    let k = values[weights.0].shape()[0];
                    let d = values[i].numel();
                    if req(*weights) {
                        let f = values[frames.0].data();
                        let gw = ensure(grads, values, weights.0);
                        for (t, gwt) in gw.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for (&fv, &go) in f[t * d..(t + 1) * d].iter().zip(g) {
                                acc = acc + fv * go;
                            }
                            *gwt = *gwt + acc;
                        }
                    }
                    if req(*frames) {
                        let w = values[weights.0].data();
                        let gf = ensure(grads, values, frames.0);
                        for t in 0..k {
                            let wv = w[t];
                            for (gi, &go) in gf[t * d..(t + 1) * d].iter_mut().zip(g) {
                                *gi = *gi + wv * go;
                            }
                        }
                    }
                }
                Op::NonlocalRowSoftmax { scores } => {
                    if req(*scores) {
                        let n = values[i].shape()[0];
                        let y = values[i].data();
                        let gs = ensure(grads, values, scores.0);
                        for r in 0..n {
                            let y_row = &y[r * n..][..n];
                            let g_row = &g[r * n..][..n];
                            let mut dot = T::zero();
                            for (&yv, &go) in y_row.iter().zip(g_row) {
                                dot = dot + yv * go;
                            }
                            let gs_row = &mut gs[r * n..][..n];
                            for ((gi, &yv), &go) in gs_row.iter_mut().zip(y_row).zip(g_row) {
                                *gi = *gi + yv * (go - dot);
                            }
                        }
                    }
                }
                Op::FramewiseMatmul { attn, values: vals } => {
                    let n = values[attn.0].shape()[0];
                    let d = values[vals.0].shape()[1];
                    if req(*attn) {
                        let v = values[vals.0].data();
                        let ga = ensure(grads, values, attn.0);
                        // dA[i, j] += dot(gout[i, :], values[j, :])
                        conv::matmul_acc(g, (n, d), v, n, true, ga);
                    }
                    if req(*vals) {
                        let a = values[attn.0].data();
                        let gv = ensure(grads, values, vals.0);
                        // dV[j, :] += sum_i A[i, j] * gout[i, :]  == A^T x gout
                        conv::matmul_acc_ta(a, (n, n), g, d, gv);
                    }
                }
                Op::Reshape { input } => {
                    if req(*input) {
                        let gin = ensure(grads, values, input.0);
                        for (gi, &go) in gin.iter_mut().zip(g) {
                            *gi = *gi + go;
                        }
                    }
                }
                Op::Sum { input } => {
                    if req(*input) {
                        let go = g[0];
                        let gin = ensure(grads, values, input.0);
                        for gi in gin.iter_mut() {
                            *gi = *gi + go;
                        }
                    }
                }
                Op::L2Loss { input, target } => {
                    if req(*input) {
                        let go = g[0];
                        let two = T::from_f64(2.0);
                        let x = values[input.0].data();
                        let gin = ensure(grads, values, input.0);
                        for ((gi, &xv), &tv) in gin.iter_mut().zip(x).zip(target.data()) {
                            *gi = *gi + two * (xv - tv) * go;
                        }
                    }
                }
                Op::BceWithLogit { logit, label } => {
                    if req(*logit) {
                        let go = g[0];
                        let z = values[logit.0].data()[0];
                        let sig = T::one() / (T::one() + (-z).exp());
                        let gl = ensure(grads, values, logit.0);
                        gl[0] = gl[0] + (sig - T::from_f64(*label)) * go;
                    }
                }
                Op::CeWithLogits { logits, label } => {
                    if req(*logits) {
                        let go = g[0];
                        let x = values[logits.0].data();
                        let mut m = x[0];
                        for &v in x {
                            if v > m {
                                m = v;
                            }
                        }
                        let mut denom = T::zero();
                        for &v in x {
                            denom = denom + (v - m).exp();
                        }
                        let gl = ensure(grads, values, logits.0);
                        for (j, gi) in gl.iter_mut().enumerate() {
                            let p = (x[j] - m).exp() / denom;
                            let ind = if j == *label { T::one() } else { T::zero() };
                            *gi = *gi + (p - ind) * go;
                        }
                    }
                }
            }
        }
        self.grads[i] = Some(gout_t);
    }
}
