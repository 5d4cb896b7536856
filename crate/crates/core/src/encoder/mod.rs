//! Patch encoder: four convolution blocks followed by two fully connected
//! layers, mapping each `C×32×32` patch to a feature vector.
//!
//! ```text
//! conv 5×5 → bn → relu → pool 3/2/1
//! conv 3×3 → bn → relu → pool 3/2/1
//! conv 3×3 → bn → relu → pool 3/2/1
//! conv 1×1 → bn → relu
//! flatten (channel-major) → fc1 → relu → dropout → fc2
//! ```
//!
//! A single [`EncoderParams`] is shared by every patch of every image.

pub mod layers;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView4, Axis, Zip};
use rand::Rng;

pub use layers::{BatchNorm, ConvLayer, Dense, Mode};

use crate::error::{Error, Result};
use crate::params::{join, ParamKind, Parameters, Visitor, VisitorMut};
use crate::preprocess::PATCH_SIZE;
use crate::Scalar;

pub const KERNEL_SIZES: [usize; 4] = [5, 3, 3, 1];
pub const POOL_KERNEL: usize = 3;
pub const POOL_STRIDE: usize = 2;
pub const POOL_PAD: usize = 1;
/// Spatial side length after the last convolution block.
pub const FINAL_SIDE: usize = 3;

/// Layer widths of the encoder. Structure (kernel sizes, pooling, layer
/// order) is fixed; only widths vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub channels: usize,
    pub conv_widths: [usize; 4],
    pub fc1: usize,
    pub output: usize,
}

impl EncoderShape {
    pub const TABLE_I: EncoderShape = EncoderShape {
        channels: 3,
        conv_widths: [96, 256, 384, 512],
        fc1: 4096,
        output: 256,
    };

    pub fn flat_len(&self) -> usize {
        self.conv_widths[3] * FINAL_SIDE * FINAL_SIDE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub conv: [ConvLayer<T>; 4],
    pub bn: [BatchNorm<T>; 4],
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    pub dropout_rate: T,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(shape: &EncoderShape) -> Self {
        let w = shape.conv_widths;
        let ins = [shape.channels, w[0], w[1], w[2]];
        let conv = std::array::from_fn(|i| ConvLayer::zeros(w[i], ins[i], KERNEL_SIZES[i], 1, 0));
        let bn = std::array::from_fn(|i| BatchNorm::new(w[i]));
        Self {
            conv,
            bn,
            fc1: Dense::zeros(shape.fc1, shape.flat_len()),
            fc2: Dense::zeros(shape.output, shape.fc1),
            dropout_rate: T::lit(0.5),
        }
    }

    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            channels: self.conv[0].in_channels(),
            conv_widths: std::array::from_fn(|i| self.conv[i].out_channels()),
            fc1: self.fc1.weights.nrows(),
            output: self.fc2.weights.nrows(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.weights.nrows()
    }

    /// Zero-valued mirror used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.shape());
        z.bn = std::array::from_fn(|i| self.bn[i].zeros_like());
        z.dropout_rate = self.dropout_rate;
        z
    }
}

impl<T: Scalar> Parameters<T> for ConvLayer<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&join(prefix, "kernels"), ParamKind::Weight, self.kernels.view().into_dyn());
        f(&join(prefix, "bias"), ParamKind::Bias, self.bias.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&join(prefix, "kernels"), ParamKind::Weight, self.kernels.view_mut().into_dyn());
        f(&join(prefix, "bias"), ParamKind::Bias, self.bias.view_mut().into_dyn());
    }
}

impl<T: Scalar> Parameters<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&join(prefix, "gamma"), ParamKind::NormAffine, self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), ParamKind::NormAffine, self.beta.view().into_dyn());
        f(&join(prefix, "running_mean"), ParamKind::RunningStat, self.running_mean.view().into_dyn());
        f(&join(prefix, "running_var"), ParamKind::RunningStat, self.running_var.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&join(prefix, "gamma"), ParamKind::NormAffine, self.gamma.view_mut().into_dyn());
        f(&join(prefix, "beta"), ParamKind::NormAffine, self.beta.view_mut().into_dyn());
        f(&join(prefix, "running_mean"), ParamKind::RunningStat, self.running_mean.view_mut().into_dyn());
        f(&join(prefix, "running_var"), ParamKind::RunningStat, self.running_var.view_mut().into_dyn());
    }
}

impl<T: Scalar> Parameters<T> for Dense<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&join(prefix, "weights"), ParamKind::Weight, self.weights.view().into_dyn());
        f(&join(prefix, "bias"), ParamKind::Bias, self.bias.view().into_dyn());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&join(prefix, "weights"), ParamKind::Weight, self.weights.view_mut().into_dyn());
        f(&join(prefix, "bias"), ParamKind::Bias, self.bias.view_mut().into_dyn());
    }
}

impl<T: Scalar> Parameters<T> for EncoderParams<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for i in 0..4 {
            self.conv[i].visit(&join(prefix, &format!("conv{}", i + 1)), f);
            self.bn[i].visit(&join(prefix, &format!("bn{}", i + 1)), f);
        }
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        for i in 0..4 {
            self.conv[i].visit_mut(&join(prefix, &format!("conv{}", i + 1)), f);
            self.bn[i].visit_mut(&join(prefix, &format!("bn{}", i + 1)), f);
        }
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    input: Array4<T>,
    bn: layers::BatchNormCache<T>,
    pool_argmax: Option<Vec<Array3<u32>>>,
}

/// Activations of one encoder pass over a batch of patches.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    blocks: Vec<BlockTrace<T>>,
    flat: Array2<T>,
    fc1_relu: Array2<T>,
    dropout_mask: Option<Array2<T>>,
    fc2_input: Array2<T>,
    /// `(layer name, output shape per patch)` in execution order.
    pub shapes: Vec<(&'static str, Vec<usize>)>,
}

impl<T: Scalar> EncoderTrace<T> {
    /// Which side of zero every ReLU input fell on and which element won
    /// every max-pool window. Two passes with equal patterns lie on the same
    /// smooth piece of the encoder.
    pub fn activation_pattern(&self, params: &EncoderParams<T>) -> Vec<u32> {
        let mut out = Vec::new();
        for (block, bn) in self.blocks.iter().zip(&params.bn) {
            for (ch, plane) in block.bn.normalized.axis_iter(Axis(1)).enumerate() {
                let (g, b) = (bn.gamma[ch], bn.beta[ch]);
                out.extend(plane.iter().map(|&xh| u32::from(g * xh + b > T::zero())));
            }
            for a in block.pool_argmax.iter().flatten() {
                out.extend(a.iter().copied());
            }
        }
        out.extend(self.fc1_relu.iter().map(|&v| u32::from(v > T::zero())));
        out
    }
}

const BLOCK_NAMES: [(&str, &str); 4] = [
    ("encoder.conv1", "encoder.pool1"),
    ("encoder.conv2", "encoder.pool2"),
    ("encoder.conv3", "encoder.pool3"),
    ("encoder.conv4", ""),
];

fn check_finite<T: Scalar>(layer: &str, values: &[T]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault(layer.to_string()))
    }
}

/// Runs a batch of patches (`P×C×32×32`) through the encoder, returning the
/// `P×F` feature matrix and the trace needed by [`encode_batch_backward`].
///
/// In train mode batch normalization uses statistics over the whole batch and
/// updates the running estimates, and dropout is drawn from `rng`.
pub fn encode_batch<T: Scalar, R: Rng + ?Sized>(
    patches: ArrayView4<T>,
    params: &mut EncoderParams<T>,
    mode: Mode,
    rng: Option<&mut R>,
) -> Result<(Array2<T>, EncoderTrace<T>)> {
    let (n, c, h, w) = patches.dim();
    if c != params.conv[0].in_channels() || h != PATCH_SIZE || w != PATCH_SIZE {
        return Err(Error::InvalidShape(format!(
            "encoder expects {}×{PATCH_SIZE}×{PATCH_SIZE} patches, got {c}×{h}×{w}",
            params.conv[0].in_channels()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty patch batch".into()));
    }
    let mut shapes = vec![("input", vec![c, h, w])];
    let mut blocks = Vec::with_capacity(4);
    let mut x = patches.to_owned();
    for (b, &(conv_name, pool_name)) in BLOCK_NAMES.iter().enumerate() {
        let layer = &params.conv[b];
        let conv_out = layers::conv2d_forward_batch(x.view(), layer)?;
        check_finite(conv_name, conv_out.as_slice().expect("contiguous"))?;
        shapes.push((conv_name, conv_out.shape()[1..].to_vec()));
        let (mut act, bn_cache) = layers::batchnorm_forward(conv_out.view(), &mut params.bn[b], mode)?;
        act.mapv_inplace(|v| v.max(T::zero()));
        let mut pool_argmax = None;
        let next = if pool_name.is_empty() {
            act
        } else {
            let (_, pc, ah, aw) = act.dim();
            let ph = layers::pool_output_size(ah, POOL_KERNEL, POOL_STRIDE, POOL_PAD);
            let pw = layers::pool_output_size(aw, POOL_KERNEL, POOL_STRIDE, POOL_PAD);
            let mut pooled = Array4::zeros((n, pc, ph, pw));
            let mut args = Vec::with_capacity(n);
            for (patch, mut dst) in act.outer_iter().zip(pooled.outer_iter_mut()) {
                let mut a = Array3::zeros((pc, ph, pw));
                layers::maxpool_into(
                    patch.as_slice().expect("contiguous"),
                    (pc, ah, aw),
                    POOL_KERNEL,
                    POOL_STRIDE,
                    POOL_PAD,
                    dst.as_slice_mut().expect("contiguous"),
                    a.as_slice_mut().expect("contiguous"),
                );
                args.push(a);
            }
            shapes.push((pool_name, vec![pc, ph, pw]));
            pool_argmax = Some(args);
            pooled
        };
        blocks.push(BlockTrace {
            input: x,
            bn: bn_cache,
            pool_argmax,
        });
        x = next;
    }
    let (_, fc, fh, fw) = x.dim();
    let flat = x.into_shape_with_order((n, fc * fh * fw)).expect("contiguous");
    if flat.ncols() != params.fc1.weights.ncols() {
        return Err(Error::InvalidShape(format!(
            "flattened features have {} entries, fc1 expects {}",
            flat.ncols(),
            params.fc1.weights.ncols()
        )));
    }
    let mut fc1 = params.fc1.forward(flat.view());
    fc1.mapv_inplace(|v| v.max(T::zero()));
    check_finite("encoder.fc1", fc1.as_slice().expect("contiguous"))?;
    shapes.push(("encoder.fc1", vec![fc1.ncols()]));
    let rate = params.dropout_rate;
    let dropout_mask = match (mode, rng) {
        (Mode::Train, Some(rng)) if rate > T::zero() => {
            let keep = T::one() - rate;
            let scale = T::one() / keep;
            let keep_f = keep.as_f64();
            Some(Array2::from_shape_fn(fc1.raw_dim(), |_| {
                if rng.random::<f64>() < keep_f {
                    scale
                } else {
                    T::zero()
                }
            }))
        }
        _ => None,
    };
    let fc2_input = match &dropout_mask {
        Some(m) => &fc1 * m,
        None => fc1.clone(),
    };
    let out = params.fc2.forward(fc2_input.view());
    check_finite("encoder.fc2", out.as_slice().expect("contiguous"))?;
    shapes.push(("encoder.fc2", vec![out.ncols()]));
    Ok((
        out,
        EncoderTrace {
            blocks,
            flat,
            fc1_relu: fc1,
            dropout_mask,
            fc2_input,
            shapes,
        },
    ))
}

/// Reverse pass of [`encode_batch`]. Gradients accumulate into `grad`; the
/// patch gradient is returned when `want_input_grad` is set.
pub fn encode_batch_backward<T: Scalar>(
    trace: &EncoderTrace<T>,
    upstream: ArrayView2<T>,
    params: &EncoderParams<T>,
    grad: &mut EncoderParams<T>,
    want_input_grad: bool,
) -> Option<Array4<T>> {
    let n = upstream.nrows();
    let d_fc2_in = params.fc2.backward(trace.fc2_input.view(), upstream, &mut grad.fc2);
    let mut d_fc1 = match &trace.dropout_mask {
        Some(m) => d_fc2_in * m,
        None => d_fc2_in,
    };
    Zip::from(&mut d_fc1).and(&trace.fc1_relu).for_each(|g, &a| {
        if a <= T::zero() {
            *g = T::zero()
        }
    });
    let d_flat = params.fc1.backward(trace.flat.view(), d_fc1.view(), &mut grad.fc1);
    let last = params.conv[3].out_channels();
    let mut d = d_flat
        .into_shape_with_order((n, last, FINAL_SIDE, FINAL_SIDE))
        .expect("contiguous");
    for b in (0..4).rev() {
        let block = &trace.blocks[b];
        let bn = &params.bn[b];
        let (_, oc, oh, ow) = block.bn.normalized.dim();
        if let Some(args) = &block.pool_argmax {
            let d_std = d.as_standard_layout();
            let up = d_std.as_slice().expect("standard layout");
            let per_patch = up.len() / n;
            let mut unpooled = Array4::zeros((n, oc, oh, ow));
            for (p, (mut dst, a)) in unpooled.outer_iter_mut().zip(args).enumerate() {
                layers::maxpool_backward_into(
                    &up[p * per_patch..(p + 1) * per_patch],
                    a.as_slice().expect("contiguous"),
                    oc,
                    oh * ow,
                    dst.as_slice_mut().expect("contiguous"),
                );
            }
            d = unpooled;
        }
        {
            let plane = oh * ow;
            let xhat = block.bn.normalized.as_slice().expect("contiguous");
            let dv = d.as_slice_mut().expect("contiguous");
            for (i, (dchunk, xchunk)) in dv.chunks_mut(plane).zip(xhat.chunks(plane)).enumerate() {
                let ch = i % oc;
                let (g, beta) = (bn.gamma[ch], bn.beta[ch]);
                for (v, &xh) in dchunk.iter_mut().zip(xchunk) {
                    if g * xh + beta <= T::zero() {
                        *v = T::zero();
                    }
                }
            }
        }
        let d_conv = layers::batchnorm_backward(d.view(), &block.bn, bn, &mut grad.bn[b]);
        let need_dx = b > 0 || want_input_grad;
        d = layers::conv2d_backward_batch(block.input.view(), d_conv.view(), &params.conv[b], &mut grad.conv[b], need_dx)?;
    }
    Some(d)
}

/// Encodes one patch (`C×32×32`) without dropout.
pub fn encode_patch<T: Scalar>(patch: ndarray::ArrayView3<T>, params: &EncoderParams<T>, mode: Mode) -> Result<Array1<T>> {
    if mode == Mode::Train {
        return Err(Error::Config(
            "a single patch cannot be batch-normalized in train mode; use encode_batch".into(),
        ));
    }
    let batch = patch.insert_axis(Axis(0));
    let mut local = params.clone();
    let (out, _) = encode_batch::<T, rand::rngs::ThreadRng>(batch, &mut local, Mode::Eval, None)?;
    Ok(out.row(0).to_owned())
}

/// Per-patch output shapes of a full forward pass, `input` first.
pub fn shape_trace<T: Scalar>(params: &EncoderParams<T>) -> Result<Vec<(&'static str, Vec<usize>)>> {
    let c = params.conv[0].in_channels();
    let probe = Array4::zeros((1, c, PATCH_SIZE, PATCH_SIZE));
    let mut local = params.clone();
    let (_, trace) = encode_batch::<T, rand::rngs::ThreadRng>(probe.view(), &mut local, Mode::Eval, None)?;
    Ok(trace.shapes)
}
