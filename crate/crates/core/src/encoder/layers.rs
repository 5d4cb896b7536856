//! Convolution, ceil-mode max pooling, batch normalization and dense layers
//! with their reverse-mode passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut2, Axis};

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `out_ch × in_ch × k × k`
    pub kernels: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernels: Array4::zeros((out_ch, in_ch, k, k)),
            bias: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.dim().1
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.dim().2
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size();
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < k || wp < k || self.stride == 0 {
            return Err(Error::InvalidShape(format!(
                "input {h}x{w} (pad {}) smaller than kernel {k}",
                self.pad
            )));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn kernel_matrix(&self) -> ArrayView2<'_, T> {
        let (o, c, k, _) = self.kernels.dim();
        self.kernels
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("kernels are contiguous")
    }
}

/// Unrolls receptive fields into columns: `(C·k·k) × (Ho·Wo)`.
pub fn im2col<T: Scalar>(input: ArrayView3<T>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<T> {
    let (c, _, _) = input.dim();
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    im2col_into(input, k, stride, pad, ho, wo, cols.as_slice_mut().expect("contiguous"));
    cols
}

/// Writes the in-bounds entries of the column matrix into `cols`. The
/// entries left untouched (padding taps) depend only on the geometry, so a
/// zeroed buffer can be reused across inputs of the same shape.
fn im2col_into<T: Scalar>(input: ArrayView3<T>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let (c, h, w) = input.dim();
    let input = input.as_standard_layout();
    let src = input.as_slice().expect("standard layout");
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (ox_lo, ox_hi) = valid_span(kx, stride, pad, w, wo);
                for oy in 0..ho {
                    let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&y| y < h) else {
                        continue;
                    };
                    let src_row = &src[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        dst_row[ox_lo..ox_hi].copy_from_slice(&src_row[ox_lo + kx - pad..ox_hi + kx - pad]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox] = src_row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox` whose tap `kx` lands inside the input row.
fn valid_span(kx: usize, stride: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    // need 0 <= ox*stride + kx - pad < w
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if w + pad > kx { (w + pad - kx).div_ceil(stride).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Scalar>(
    cols: ArrayView2<T>,
    shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<T> {
    let cols = cols.as_standard_layout();
    let mut out = Array3::zeros(shape);
    col2im_add(
        cols.as_slice().expect("standard layout"),
        shape,
        k,
        stride,
        pad,
        (ho, wo),
        out.as_slice_mut().expect("contiguous"),
    );
    out
}

fn col2im_add<T: Scalar>(
    src: &[T],
    shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    out: &mut [T],
) {
    let (c, h, w) = shape;
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let col = &src[row * plane..(row + 1) * plane];
                let (ox_lo, ox_hi) = valid_span(kx, stride, pad, w, wo);
                for oy in 0..ho {
                    let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&y| y < h) else {
                        continue;
                    };
                    let dst_row = &mut out[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                    let src_row = &col[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let dst = &mut dst_row[ox_lo + kx - pad..ox_hi + kx - pad];
                        for (d, &v) in dst.iter_mut().zip(&src_row[ox_lo..ox_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox * stride + kx - pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation plus bias over one `C×H×W` input.
pub fn conv2d_forward<T: Scalar>(input: ArrayView3<T>, layer: &ConvLayer<T>) -> Result<Array3<T>> {
    let (c, h, w) = input.dim();
    if c != layer.in_channels() {
        return Err(Error::InvalidShape(format!(
            "convolution expects {} input channels, got {c}",
            layer.in_channels()
        )));
    }
    let (ho, wo) = layer.output_size(h, w)?;
    let cols = im2col(input, layer.kernel_size(), layer.stride, layer.pad, ho, wo);
    let mut out = Array2::zeros((layer.out_channels(), ho * wo));
    for (mut row, &b) in out.outer_iter_mut().zip(layer.bias.iter()) {
        row.fill(b);
    }
    general_mat_mul(T::one(), &layer.kernel_matrix(), &cols, T::one(), &mut out);
    Ok(out.into_shape_with_order((layer.out_channels(), ho, wo)).expect("contiguous"))
}

/// Accumulates kernel and bias gradients into `grad` and returns the input
/// gradient when `want_input_grad` is set.
pub fn conv2d_backward<T: Scalar>(
    input: ArrayView3<T>,
    upstream: ArrayView3<T>,
    layer: &ConvLayer<T>,
    grad: &mut ConvLayer<T>,
    want_input_grad: bool,
) -> Option<Array3<T>> {
    let (o, ho, wo) = upstream.dim();
    let k = layer.kernel_size();
    let cols = im2col(input, k, layer.stride, layer.pad, ho, wo);
    let up = upstream.into_shape_with_order((o, ho * wo)).expect("contiguous upstream");
    {
        let (go, gc, gk, _) = grad.kernels.dim();
        let mut gk2: ArrayViewMut2<T> = grad
            .kernels
            .view_mut()
            .into_shape_with_order((go, gc * gk * gk))
            .expect("contiguous");
        general_mat_mul(T::one(), &up, &cols.t(), T::one(), &mut gk2);
    }
    for (g, row) in grad.bias.iter_mut().zip(up.outer_iter()) {
        *g += row.sum();
    }
    if !want_input_grad {
        return None;
    }
    let dcols = layer.kernel_matrix().t().dot(&up);
    Some(col2im(dcols.view(), input.dim(), k, layer.stride, layer.pad, ho, wo))
}

/// [`conv2d_forward`] over every image of a `P×C×H×W` batch, reusing one
/// column buffer.
pub fn conv2d_forward_batch<T: Scalar>(input: ArrayView4<T>, layer: &ConvLayer<T>) -> Result<Array4<T>> {
    let (n, c, h, w) = input.dim();
    if c != layer.in_channels() {
        return Err(Error::InvalidShape(format!(
            "convolution expects {} input channels, got {c}",
            layer.in_channels()
        )));
    }
    let (ho, wo) = layer.output_size(h, w)?;
    let (o, k) = (layer.out_channels(), layer.kernel_size());
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    let mut out = Array4::zeros((n, o, ho, wo));
    let kernels = layer.kernel_matrix();
    for (src, dst) in input.outer_iter().zip(out.outer_iter_mut()) {
        im2col_into(src, k, layer.stride, layer.pad, ho, wo, cols.as_slice_mut().expect("contiguous"));
        let mut dst = dst.into_shape_with_order((o, ho * wo)).expect("contiguous");
        for (mut row, &b) in dst.outer_iter_mut().zip(layer.bias.iter()) {
            row.fill(b);
        }
        general_mat_mul(T::one(), &kernels, &cols, T::one(), &mut dst);
    }
    Ok(out)
}

/// [`conv2d_backward`] over a whole batch.
pub fn conv2d_backward_batch<T: Scalar>(
    input: ArrayView4<T>,
    upstream: ArrayView4<T>,
    layer: &ConvLayer<T>,
    grad: &mut ConvLayer<T>,
    want_input_grad: bool,
) -> Option<Array4<T>> {
    let (n, c, h, w) = input.dim();
    let (_, o, ho, wo) = upstream.dim();
    let k = layer.kernel_size();
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    let mut dcols = Array2::zeros((c * k * k, ho * wo));
    let mut dx = want_input_grad.then(|| Array4::zeros((n, c, h, w)));
    let kernels = layer.kernel_matrix();
    let (go, gc, gk, _) = grad.kernels.dim();
    for p in 0..n {
        im2col_into(input.index_axis(Axis(0), p), k, layer.stride, layer.pad, ho, wo, cols.as_slice_mut().expect("contiguous"));
        let up = upstream.index_axis(Axis(0), p);
        let up = up.to_shape((o, ho * wo)).expect("reshape");
        {
            let mut gk2: ArrayViewMut2<T> = grad
                .kernels
                .view_mut()
                .into_shape_with_order((go, gc * gk * gk))
                .expect("contiguous");
            general_mat_mul(T::one(), &up, &cols.t(), T::one(), &mut gk2);
        }
        for (g, row) in grad.bias.iter_mut().zip(up.outer_iter()) {
            *g += row.sum();
        }
        if let Some(dx) = dx.as_mut() {
            general_mat_mul(T::one(), &kernels.t(), &up, T::zero(), &mut dcols);
            let mut dst = dx.index_axis_mut(Axis(0), p);
            col2im_add(
                dcols.as_slice().expect("contiguous"),
                (c, h, w),
                k,
                layer.stride,
                layer.pad,
                (ho, wo),
                dst.as_slice_mut().expect("contiguous"),
            );
        }
    }
    dx
}

/// Ceil-mode pooled size; a window that would start inside the right or
/// bottom padding is dropped.
pub fn pool_output_size(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    let span = (len + 2 * pad).saturating_sub(k);
    let mut out = span.div_ceil(stride) + 1;
    if (out - 1) * stride >= len + pad {
        out -= 1;
    }
    out
}

/// Max pooling with ceil-mode window placement. Padding never wins a max.
/// Returns the pooled tensor and, per output, the flat `y·W + x` index of the
/// winning input pixel.
pub fn maxpool_ceil<T: Scalar>(input: ArrayView3<T>, k: usize, stride: usize, pad: usize) -> Result<(Array3<T>, Array3<u32>)> {
    if k == 0 || stride == 0 {
        return Err(Error::InvalidShape("pooling kernel and stride must be positive".into()));
    }
    let (c, h, w) = input.dim();
    let ho = pool_output_size(h, k, stride, pad);
    let wo = pool_output_size(w, k, stride, pad);
    let input = input.as_standard_layout();
    let mut out = vec![T::zero(); c * ho * wo];
    let mut arg = vec![0u32; c * ho * wo];
    maxpool_into(input.as_slice().expect("standard layout"), (c, h, w), k, stride, pad, &mut out, &mut arg);
    let out = Array3::from_shape_vec((c, ho, wo), out).expect("sizes agree");
    let arg = Array3::from_shape_vec((c, ho, wo), arg).expect("sizes agree");
    Ok((out, arg))
}

/// Clipped `[lo, hi)` input span of every pooling window along one axis.
fn window_spans(len: usize, k: usize, stride: usize, pad: usize) -> Vec<(usize, usize)> {
    (0..pool_output_size(len, k, stride, pad))
        .map(|o| ((o * stride).saturating_sub(pad), (o * stride + k).saturating_sub(pad).min(len)))
        .collect()
}

/// [`maxpool_ceil`] on raw `C×H×W` data, writing into caller buffers of
/// length `C·Ho·Wo`.
pub(crate) fn maxpool_into<T: Scalar>(
    src: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
    arg: &mut [u32],
) {
    let rows = window_spans(h, k, stride, pad);
    let cols = window_spans(w, k, stride, pad);
    let mut o = 0;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y_lo, y_hi) in &rows {
            for &(x_lo, x_hi) in &cols {
                let mut best = T::neg_infinity();
                let mut best_at = y_lo * w + x_lo;
                for iy in y_lo..y_hi {
                    let base = iy * w;
                    for ix in base + x_lo..base + x_hi {
                        let v = plane[ix];
                        if v > best {
                            best = v;
                            best_at = ix;
                        }
                    }
                }
                out[o] = best;
                arg[o] = best_at as u32;
                o += 1;
            }
        }
    }
}

pub fn maxpool_backward<T: Scalar>(upstream: ArrayView3<T>, argmax: &Array3<u32>, input_hw: (usize, usize)) -> Array3<T> {
    let (c, _, _) = upstream.dim();
    let (h, w) = input_hw;
    let upstream = upstream.as_standard_layout();
    let argmax = argmax.as_standard_layout();
    let mut out = Array3::zeros((c, h, w));
    maxpool_backward_into(
        upstream.as_slice().expect("standard layout"),
        argmax.as_slice().expect("standard layout"),
        c,
        h * w,
        out.as_slice_mut().expect("contiguous"),
    );
    out
}

/// Scatter-adds each pooled gradient onto its winning input pixel.
pub(crate) fn maxpool_backward_into<T: Scalar>(upstream: &[T], argmax: &[u32], channels: usize, plane: usize, out: &mut [T]) {
    let pooled = upstream.len() / channels.max(1);
    for ch in 0..channels {
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        let range = ch * pooled..(ch + 1) * pooled;
        for (&g, &i) in upstream[range.clone()].iter().zip(&argmax[range]) {
            dst[i as usize] += g;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            epsilon: T::lit(1e-5),
            momentum: T::lit(0.1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        Self {
            gamma: Array1::zeros(c),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::zeros(c),
            epsilon: self.epsilon,
            momentum: self.momentum,
        }
    }
}

/// What the backward pass needs from a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Array4<T>,
    pub inv_std: Array1<T>,
    pub mode: Mode,
}

/// Per-channel normalization over the `(batch, H, W)` axes. In train mode
/// batch statistics are used and folded into the running estimates.
pub fn batchnorm_forward<T: Scalar>(
    input: ArrayView4<T>,
    params: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<(Array4<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.dim();
    if c != params.gamma.len() {
        return Err(Error::InvalidShape(format!(
            "batch norm has {} channels, input has {c}",
            params.gamma.len()
        )));
    }
    if mode == Mode::Train && n < 2 {
        return Err(Error::Config("batch normalization in train mode needs a batch of at least 2".into()));
    }
    let count = T::from_usize(n * h * w).expect("count");
    let input = input.as_standard_layout();
    let src = input.as_slice().expect("standard layout");
    let hw = h * w;
    // plane `(p, ch)` starts at `(p * c + ch) * hw`
    let planes = |ch: usize| (0..n).map(move |p| (p * c + ch) * hw..(p * c + ch + 1) * hw);
    let mut normalized = Array4::zeros((n, c, h, w));
    let mut out = Array4::zeros((n, c, h, w));
    let mut inv_std = Array1::zeros(c);
    {
        let norm = normalized.as_slice_mut().expect("contiguous");
        let dst = out.as_slice_mut().expect("contiguous");
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = planes(ch).map(|r| src[r].iter().fold(T::zero(), |a, &v| a + v)).fold(T::zero(), |a, v| a + v) / count;
                    let var = planes(ch)
                        .map(|r| src[r].iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)))
                        .fold(T::zero(), |a, v| a + v)
                        / count;
                    let m = params.momentum;
                    let unbiased = if n * hw > 1 { var * count / (count - T::one()) } else { var };
                    params.running_mean[ch] = (T::one() - m) * params.running_mean[ch] + m * mean;
                    params.running_var[ch] = (T::one() - m) * params.running_var[ch] + m * unbiased;
                    (mean, var)
                }
                Mode::Eval => (params.running_mean[ch], params.running_var[ch]),
            };
            let is = T::one() / (var + params.epsilon).sqrt();
            inv_std[ch] = is;
            let (g, b) = (params.gamma[ch], params.beta[ch]);
            for r in planes(ch) {
                for ((nv, ov), &v) in norm[r.clone()].iter_mut().zip(&mut dst[r.clone()]).zip(&src[r]) {
                    let xh = (v - mean) * is;
                    *nv = xh;
                    *ov = g * xh + b;
                }
            }
        }
    }
    Ok((out, BatchNormCache { normalized, inv_std, mode }))
}

/// Batch-norm reverse pass. Accumulates `gamma`/`beta` gradients into `grad`.
pub fn batchnorm_backward<T: Scalar>(
    upstream: ArrayView4<T>,
    cache: &BatchNormCache<T>,
    params: &BatchNorm<T>,
    grad: &mut BatchNorm<T>,
) -> Array4<T> {
    let (n, c, h, w) = upstream.dim();
    let count = T::from_usize(n * h * w).expect("count");
    let hw = h * w;
    let upstream = upstream.as_standard_layout();
    let dy = upstream.as_slice().expect("standard layout");
    let xhat = cache.normalized.as_slice().expect("contiguous");
    let mut dx = Array4::zeros((n, c, h, w));
    let dst = dx.as_slice_mut().expect("contiguous");
    for ch in 0..c {
        let planes = || (0..n).map(|p| (p * c + ch) * hw..(p * c + ch + 1) * hw);
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for r in planes() {
            for (&d, &xh) in dy[r.clone()].iter().zip(&xhat[r]) {
                sum_dy += d;
                sum_dy_xhat += d * xh;
            }
        }
        grad.gamma[ch] += sum_dy_xhat;
        grad.beta[ch] += sum_dy;
        let scale = params.gamma[ch] * cache.inv_std[ch];
        let (mean_dy, mean_dy_xhat) = match cache.mode {
            Mode::Train => (sum_dy / count, sum_dy_xhat / count),
            Mode::Eval => (T::zero(), T::zero()),
        };
        for r in planes() {
            for ((o, &d), &xh) in dst[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xhat[r]) {
                *o = scale * (d - mean_dy - xh * mean_dy_xhat);
            }
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `out × in`
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(out: usize, input: usize) -> Self {
        Self {
            weights: Array2::zeros((out, input)),
            bias: Array1::zeros(out),
        }
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weights.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: ArrayView2<T>, upstream: ArrayView2<T>, grad: &mut Dense<T>) -> Array2<T> {
        general_mat_mul(T::one(), &upstream.t(), &x, T::one(), &mut grad.weights);
        grad.bias += &upstream.sum_axis(Axis(0));
        upstream.dot(&self.weights)
    }
}

pub fn all_finite<'a, T: Scalar, I: IntoIterator<Item = &'a T>>(values: I) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn ramp(shape: (usize, usize, usize)) -> Array3<f64> {
        Array::from_shape_fn(shape, |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 17) as f64 / 17.0 - 0.4)
    }

    #[test]
    fn conv1_shape_is_96_by_28_by_28() {
        let layer = ConvLayer::<f64>::zeros(96, 3, 5, 1, 0);
        let out = conv2d_forward(ramp((3, 32, 32)).view(), &layer).unwrap();
        assert_eq!(out.dim(), (96, 28, 28));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut layer = ConvLayer::<f64>::zeros(4, 2, 3, 1, 0);
        layer.kernels.fill(0.7);
        let out = conv2d_forward(Array3::zeros((2, 6, 6)).view(), &layer).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut layer = ConvLayer::<f64>::zeros(1, 1, 1, 1, 0);
        layer.kernels[[0, 0, 0, 0]] = 1.0;
        let x = ramp((1, 3, 3));
        assert_eq!(conv2d_forward(x.view(), &layer).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut layer = ConvLayer::<f64>::zeros(2, 2, 3, 2, 1);
        layer.kernels = Array::from_shape_fn((2, 2, 3, 3), |(o, c, y, x)| (o + 2 * c + y) as f64 * 0.1 - x as f64 * 0.2);
        layer.bias = ndarray::arr1(&[0.5, -0.25]);
        let x = ramp((2, 7, 6));
        let out = conv2d_forward(x.view(), &layer).unwrap();
        let (_, ho, wo) = out.dim();
        for o in 0..2 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = layer.bias[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 7 && ix >= 0 && ix < 6 {
                                    acc += layer.kernels[[o, c, ky, kx]] * x[[c, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - out[[o, oy, ox]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let layer = ConvLayer::<f64>::zeros(2, 3, 3, 1, 0);
        assert!(matches!(conv2d_forward(ramp((2, 5, 5)).view(), &layer), Err(Error::InvalidShape(_))));
        assert!(conv2d_forward(ramp((3, 2, 2)).view(), &layer).is_err());
    }

    #[test]
    fn ceil_pool_sizes_follow_the_table() {
        assert_eq!(pool_output_size(28, 3, 2, 1), 15);
        assert_eq!(pool_output_size(13, 3, 2, 1), 7);
        assert_eq!(pool_output_size(5, 3, 2, 1), 3);
        let (out, _) = maxpool_ceil(Array3::<f64>::zeros((96, 28, 28)).view(), 3, 2, 1).unwrap();
        assert_eq!(out.dim(), (96, 15, 15));
        let (out, _) = maxpool_ceil(Array3::<f64>::zeros((256, 13, 13)).view(), 3, 2, 1).unwrap();
        assert_eq!(out.dim(), (256, 7, 7));
    }

    #[test]
    fn constant_field_pools_to_constant() {
        let x = Array3::from_elem((2, 9, 9), -3.5f64);
        let (out, _) = maxpool_ceil(x.view(), 3, 2, 1).unwrap();
        assert!(out.iter().all(|&v| v == -3.5));
    }

    #[test]
    fn padding_never_wins_over_negative_pixels() {
        let x = Array3::from_elem((1, 4, 4), -10.0f64);
        let (out, _) = maxpool_ceil(x.view(), 3, 2, 1).unwrap();
        assert!(out.iter().all(|&v| v == -10.0));
    }

    #[test]
    fn pool_backward_routes_to_argmax() {
        let x = ramp((1, 5, 5));
        let (out, arg) = maxpool_ceil(x.view(), 3, 2, 1).unwrap();
        let up = Array3::<f64>::ones(out.dim());
        let dx = maxpool_backward(up.view(), &arg, (5, 5));
        assert_eq!(dx.sum(), out.len() as f64);
        for (&a, &o) in arg.iter().zip(out.iter()) {
            let (y, xx) = (a as usize / 5, a as usize % 5);
            assert_eq!(x[[0, y, xx]], o);
        }
    }

    #[test]
    fn normalized_batch_passes_through() {
        // per channel: values ±1 with equal counts → mean 0, variance 1
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(n, _, y, xx)| if (n + y + xx) % 2 == 0 { 1.0 } else { -1.0 });
        let mut bn = BatchNorm::<f64>::new(3);
        let (y, _) = batchnorm_forward(x.view(), &mut bn, Mode::Train).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() <= 10.0 * 1e-5);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Array4::from_shape_fn((3, 2, 2, 2), |(n, c, y, xx)| (n * 5 + c * 3 + y + xx) as f64);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma.fill(0.0);
        bn.beta = ndarray::arr1(&[0.3, -1.2]);
        let (y, _) = batchnorm_forward(x.view(), &mut bn, Mode::Train).unwrap();
        for ((_, c, _, _), &v) in y.indexed_iter() {
            assert_eq!(v, bn.beta[c]);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_leaves_stats() {
        let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, y, xx)| (c + y * xx) as f64);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.running_mean = ndarray::arr1(&[0.5, 1.0]);
        bn.running_var = ndarray::arr1(&[2.0, 0.5]);
        let before = bn.clone();
        let (a, _) = batchnorm_forward(x.view(), &mut bn, Mode::Eval).unwrap();
        let (b, _) = batchnorm_forward(x.view(), &mut bn, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(bn, before);
    }

    #[test]
    fn single_sample_train_batch_is_a_config_error() {
        let x = Array4::<f64>::zeros((1, 2, 3, 3));
        let mut bn = BatchNorm::new(2);
        assert!(matches!(batchnorm_forward(x.view(), &mut bn, Mode::Train), Err(Error::Config(_))));
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let x = Array4::from_shape_fn((4, 1, 1, 1), |(n, _, _, _)| n as f64);
        let mut bn = BatchNorm::<f64>::new(1);
        batchnorm_forward(x.view(), &mut bn, Mode::Train).unwrap();
        assert!((bn.running_mean[0] - 0.15).abs() < 1e-12);
        // unbiased variance of 0..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }
}
