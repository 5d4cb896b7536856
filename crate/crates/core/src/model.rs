//! The full network: patch encoder → LSTM stack → attention → local/global
//! fusion → per-patch classifier → attention-weighted aggregation.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, IxDyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams, AttentionWeights};
use crate::encoder::{self, EncoderParams, EncoderShape, EncoderTrace, Mode};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionParams, FusionTrace};
use crate::head::{self, HeadParams};
use crate::lstm::{self, Gate, SequenceOutput, StackParams};
use crate::params::{ParamKind, Parameters, Visitor, VisitorMut};
use crate::preprocess::{PatchSequence, PATCH_SIZE};
use crate::Scalar;

/// Which ablation of the network to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Attention, dynamic local/global weighting, attention-weighted
    /// aggregation.
    #[default]
    Full,
    /// No attention (uniform weights) and concatenation fusion.
    Variant1,
    /// Attention for the local features only, concatenation fusion, uniform
    /// aggregation.
    Variant2,
}

impl Variant {
    pub fn uses_attention(self) -> bool {
        self != Variant::Variant1
    }

    pub fn concatenates(self) -> bool {
        self != Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Variant1 => "variant1",
            Variant::Variant2 => "variant2",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "variant1" => Ok(Variant::Variant1),
            "variant2" => Ok(Variant::Variant2),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Layer widths and ablation choice. The layer structure is fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub channels: usize,
    pub conv_widths: [usize; 4],
    pub fc1: usize,
    pub feature_dim: usize,
    pub lstm_hidden: usize,
    pub attention_dim: usize,
    pub fusion_dim: usize,
    pub n_classes: usize,
    pub variant: Variant,
}

impl ArchConfig {
    /// Full-size widths: 96/256/384/512 convolutions, 4096 → 256 dense
    /// layers, 512-unit LSTMs, 256-wide attention and fusion scorers.
    pub fn standard(n_classes: usize) -> Self {
        Self {
            channels: 3,
            conv_widths: [96, 256, 384, 512],
            fc1: 4096,
            feature_dim: 256,
            lstm_hidden: 512,
            attention_dim: 256,
            fusion_dim: 256,
            n_classes,
            variant: Variant::Full,
        }
    }

    /// Narrow widths with the same structure, sized for single-core CPU
    /// training on small corpora.
    pub fn compact(n_classes: usize) -> Self {
        Self {
            channels: 3,
            conv_widths: [8, 16, 24, 32],
            fc1: 64,
            feature_dim: 32,
            lstm_hidden: 32,
            attention_dim: 16,
            fusion_dim: 16,
            n_classes,
            variant: Variant::Full,
        }
    }

    /// Every layer `width` wide; used for gradient checking.
    pub fn uniform_width(width: usize, n_classes: usize) -> Self {
        Self {
            channels: 3,
            conv_widths: [width; 4],
            fc1: width,
            feature_dim: width,
            lstm_hidden: width,
            attention_dim: width,
            fusion_dim: width,
            n_classes,
            variant: Variant::Full,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            channels: self.channels,
            conv_widths: self.conv_widths,
            fc1: self.fc1,
            output: self.feature_dim,
        }
    }

    /// Width of the classifier input: one feature for dynamic fusion, two
    /// concatenated for the ablations.
    pub fn head_input(&self) -> usize {
        if self.variant.concatenates() {
            2 * self.feature_dim
        } else {
            self.feature_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("unsupported channel count {}", self.channels)));
        }
        let dims = [self.fc1, self.feature_dim, self.lstm_hidden, self.attention_dim, self.fusion_dim];
        if self.conv_widths.iter().chain(dims.iter()).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Every tensor of the network. A zero-valued instance doubles as the
/// gradient accumulator ([`GradientSet`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    pub encoder: EncoderParams<T>,
    pub lstm: StackParams<T>,
    pub attention: AttentionParams<T>,
    pub fusion: FusionParams<T>,
    pub head: HeadParams<T>,
}

/// Gradients mirror the parameter structure exactly.
pub type GradientSet<T> = ModelParams<T>;

impl<T: Scalar> Parameters<T> for ModelParams<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        use crate::params::join;
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.lstm.visit(&join(prefix, "lstm"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        use crate::params::join;
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.lstm.visit_mut(&join(prefix, "lstm"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Glorot fan sizes. Stacked LSTM gate blocks count as four matrices;
/// scoring vectors count as `1 × A` matrices.
pub fn fans(name: &str, shape: &[usize]) -> (usize, usize) {
    match shape {
        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
        [rows, cols] if name.starts_with("lstm.") => (*cols, rows / 4),
        [rows, cols] => (*cols, *rows),
        [n] => (*n, 1),
        _ => (1, 1),
    }
}

/// Uniform samples in `±√(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> ArrayD<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(rng.random_range(-bound..=bound)))
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(arch: &ArchConfig) -> Self {
        Self {
            arch: arch.clone(),
            encoder: EncoderParams::zeros(&arch.encoder_shape()),
            lstm: StackParams::zeros(arch.feature_dim, arch.lstm_hidden),
            attention: AttentionParams::zeros(arch.lstm_hidden, arch.attention_dim),
            fusion: FusionParams::zeros(arch.lstm_hidden, arch.feature_dim, arch.fusion_dim),
            head: HeadParams::zeros(arch.head_input(), arch.n_classes),
        }
    }

    /// Xavier-uniform weights, zero biases and peepholes, unit batch-norm
    /// scale, forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut p = Self::zeros(arch);
        p.visit_mut("", &mut |name, kind, mut t| {
            if kind == ParamKind::Weight {
                let (fi, fo) = fans(name, t.shape());
                let init = xavier_init::<T, R>(t.shape(), fi, fo, rng);
                t.assign(&init);
            }
        });
        for layer in &mut p.lstm.layers {
            layer.gate_bias_mut(Gate::Forget).fill(T::one());
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.arch);
        z.encoder = self.encoder.zeros_like();
        z
    }

    /// Converts every tensor and hyperparameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.arch);
        let mut values = Vec::new();
        self.visit("", &mut |_, _, t| values.push(t.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, _, mut t| {
            let src = it.next().expect("same structure");
            for (d, s) in t.iter_mut().zip(src) {
                *d = U::lit(s);
            }
        });
        out.encoder.dropout_rate = U::lit(self.encoder.dropout_rate.as_f64());
        for (d, s) in out.encoder.bn.iter_mut().zip(&self.encoder.bn) {
            d.epsilon = U::lit(s.epsilon.as_f64());
            d.momentum = U::lit(s.momentum.as_f64());
        }
        out
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.visit("", &mut |name, _, t| {
            if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        bad
    }
}

/// Patches of several images concatenated along the batch axis.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `P × C × 32 × 32`
    pub patches: Array4<T>,
    /// Sample `i` owns rows `offsets[i]..offsets[i + 1]`.
    pub offsets: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    /// Subtracts the per-channel pixel mean and stacks the sequences.
    pub fn from_sequences(seqs: &[&PatchSequence], pixel_mean: &[f32]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let c = first.channels;
        if pixel_mean.len() != c {
            return Err(Error::InvalidShape(format!(
                "pixel mean has {} channels, patches have {c}",
                pixel_mean.len()
            )));
        }
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        let plane = PATCH_SIZE * PATCH_SIZE;
        let mut data = Vec::with_capacity(total * c * plane);
        let mut offsets = vec![0];
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::InvalidInput(format!("sample {} has no patches", seq.sample_id)));
            }
            if seq.channels != c {
                return Err(Error::InvalidShape("mixed channel counts in one batch".into()));
            }
            for patch in &seq.patches {
                for (ch, chunk) in patch.pixels.chunks_exact(plane).enumerate() {
                    data.extend(chunk.iter().map(|&v| T::lit((v - pixel_mean[ch]) as f64)));
                }
            }
            offsets.push(offsets.last().unwrap() + seq.len());
        }
        let patches = Array4::from_shape_vec((total, c, PATCH_SIZE, PATCH_SIZE), data).expect("sizes agree");
        Ok(Self { patches, offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// Every intermediate of one sample after the encoder.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub sequence: SequenceOutput<T>,
    pub scores: Option<Array1<T>>,
    attention_act: Option<Array2<T>>,
    pub attention: AttentionWeights<T>,
    pub local: Array2<T>,
    pub global: Array1<T>,
    pub fusion: Option<FusionTrace<T>>,
    pub phi: Array2<T>,
    pub per_patch: Array2<T>,
    /// Weights used to aggregate `per_patch` into `z`.
    pub aggregation: AttentionWeights<T>,
    pub z: Array1<T>,
}

/// Runs one sample's `D × F` encoder features through the rest of the
/// network.
pub fn forward_sample<T: Scalar>(params: &ModelParams<T>, features: ArrayView2<T>) -> Result<ForwardTrace<T>> {
    let d = features.nrows();
    let variant = params.arch.variant;
    let sequence = lstm::run_stack(features, &params.lstm)?;
    let mask = vec![false; d];
    let (scores, attention_act, weights) = if variant.uses_attention() {
        let (q, act) = attention::attention_scores(sequence.hidden_per_step.view(), &params.attention)?;
        let w = attention::attention_weights(q.view(), &mask)?;
        (Some(q), Some(act), w)
    } else {
        (None, None, AttentionWeights::uniform(mask.clone())?)
    };
    let local = fusion::local_features(&weights, features)?;
    let global = fusion::global_feature(sequence.final_cell_top.view(), &params.fusion)?;
    let (phi, fusion_trace) = if variant.concatenates() {
        (fusion::concat_sequence(local.view(), global.view()), None)
    } else {
        let (phi, tr) = fusion::fuse_sequence(local.view(), global.view(), &params.fusion);
        (phi, Some(tr))
    };
    let per_patch = head::patch_distributions(phi.view(), &params.head)?;
    let aggregation = match variant {
        Variant::Variant2 => AttentionWeights::uniform(mask)?,
        _ => weights.clone(),
    };
    let dist = head::aggregate(per_patch, &aggregation)?;
    if dist.z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFault("head.z".into()));
    }
    Ok(ForwardTrace {
        sequence,
        scores,
        attention_act,
        attention: weights,
        local,
        global,
        fusion: fusion_trace,
        phi,
        per_patch: dist.per_patch,
        aggregation,
        z: dist.z,
    })
}

/// Reverse pass of [`forward_sample`] for an upstream gradient on `z`.
/// Accumulates into `grad` and returns the feature gradient.
pub fn backward_sample<T: Scalar>(
    params: &ModelParams<T>,
    features: ArrayView2<T>,
    trace: &ForwardTrace<T>,
    d_z: ArrayView1<T>,
    grad: &mut GradientSet<T>,
) -> Array2<T> {
    let d = features.nrows();
    let f = params.arch.feature_dim;
    let variant = params.arch.variant;

    // z = Σ_d a_d φ̂_d
    let mut d_per_patch = Array2::zeros(trace.per_patch.raw_dim());
    for (mut row, &a) in d_per_patch.outer_iter_mut().zip(trace.aggregation.p.iter()) {
        row.assign(&(&d_z * a));
    }
    let mut d_p = Array1::<T>::zeros(d);
    if variant == Variant::Full {
        d_p += &trace.per_patch.dot(&d_z);
    }
    let d_phi = head::patch_distributions_backward(trace.phi.view(), &trace.per_patch, d_per_patch.view(), &params.head, &mut grad.head);

    let (d_local, d_global) = match &trace.fusion {
        Some(ft) => fusion::fuse_sequence_backward(
            trace.local.view(),
            trace.global.view(),
            ft,
            d_phi.view(),
            &params.fusion,
            &mut grad.fusion,
        ),
        None => fusion::concat_sequence_backward(d_phi.view(), f),
    };

    // Lf_d = p_d Y_d
    let mut d_features = Array2::zeros(features.raw_dim());
    for t in 0..d {
        let p = trace.attention.p[t];
        d_features.row_mut(t).assign(&(&d_local.row(t) * p));
        d_p[t] += d_local.row(t).dot(&features.row(t));
    }

    let d_cell = fusion::global_feature_backward(
        trace.sequence.final_cell_top.view(),
        &trace.global,
        d_global.view(),
        &params.fusion,
        &mut grad.fusion,
    );

    let d_hidden = match (&trace.attention_act, variant.uses_attention()) {
        (Some(act), true) => {
            let d_q = attention::attention_weights_backward(&trace.attention, d_p.view());
            attention::attention_scores_backward(
                trace.sequence.hidden_per_step.view(),
                act,
                d_q.view(),
                &params.attention,
                &mut grad.attention,
            )
        }
        _ => Array2::zeros(trace.sequence.hidden_per_step.raw_dim()),
    };
    d_features += &lstm::run_stack_backward(&trace.sequence, d_hidden.view(), d_cell.view(), &params.lstm, &mut grad.lstm);
    d_features
}

#[derive(Debug, Clone)]
pub struct BatchTrace<T> {
    pub encoder: EncoderTrace<T>,
    pub features: Array2<T>,
    pub samples: Vec<ForwardTrace<T>>,
}

/// Encodes every patch of the batch at once (batch-norm statistics span all
/// patches), then runs each sample's sequence part. Sample results keep batch
/// order regardless of thread count.
pub fn forward_batch<T: Scalar, R: Rng + ?Sized>(
    params: &mut ModelParams<T>,
    batch: &Batch<T>,
    mode: Mode,
    rng: Option<&mut R>,
) -> Result<BatchTrace<T>> {
    let (features, enc_trace) = encoder::encode_batch(batch.patches.view(), &mut params.encoder, mode, rng)?;
    let shared: &ModelParams<T> = params;
    let samples = (0..batch.len())
        .into_par_iter()
        .map(|i| forward_sample(shared, features.slice(s![batch.range(i), ..])))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchTrace {
        encoder: enc_trace,
        features,
        samples,
    })
}

/// Mean NLL over the batch (no regularization).
pub fn batch_nll<T: Scalar>(trace: &BatchTrace<T>, labels: &[usize]) -> Result<T> {
    let pairs: Vec<_> = trace.samples.iter().zip(labels).map(|(s, &l)| (s.z.view(), l)).collect();
    head::nll(&pairs)
}

/// Gradient of the batch-mean NLL, accumulated into `grad`; optionally also
/// returns the gradient with respect to the input patches.
pub fn backward_batch<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    trace: &BatchTrace<T>,
    labels: &[usize],
    grad: &mut GradientSet<T>,
    want_input_grad: bool,
) -> Option<Array4<T>> {
    let n = batch.len();
    let mut d_features = Array2::zeros(trace.features.raw_dim());
    for i in 0..n {
        let r = batch.range(i);
        let s = &trace.samples[i];
        let d_z = head::nll_grad(s.z.view(), labels[i], n);
        let d = backward_sample(params, trace.features.slice(s![r.clone(), ..]), s, d_z.view(), grad);
        d_features.slice_mut(s![r, ..]).assign(&d);
    }
    encoder::encode_batch_backward(&trace.encoder, d_features.view(), &params.encoder, &mut grad.encoder, want_input_grad)
}

/// Adds `2λw` to the gradient of every decayed tensor.
pub fn add_weight_decay<T: Scalar>(params: &ModelParams<T>, grad: &mut GradientSet<T>, lambda: T) {
    if lambda == T::zero() {
        return;
    }
    let mut weights = Vec::new();
    params.visit("", &mut |_, kind, t| {
        if kind.is_decayed() {
            weights.push(t.to_owned());
        }
    });
    let mut it = weights.into_iter();
    let two_l = lambda + lambda;
    grad.visit_mut("", &mut |_, kind, mut g| {
        if kind.is_decayed() {
            let w = it.next().expect("same structure");
            g.zip_mut_with(&w, |gv, &wv| *gv += two_l * wv);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::describe;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Full, Variant::Variant1, Variant::Variant2] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("variant3".parse::<Variant>().is_err());
    }

    #[test]
    fn ablations_widen_the_head() {
        let a = ArchConfig::standard(3).with_variant(Variant::Variant1);
        assert_eq!(a.head_input(), 512);
        assert_eq!(ArchConfig::standard(3).head_input(), 256);
    }

    #[test]
    fn tensor_names_are_unique() {
        let p = ModelParams::<f32>::zeros(&ArchConfig::uniform_width(2, 3));
        let names: Vec<_> = describe(&p).into_iter().map(|(n, _, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"encoder.conv1.kernels".to_string()));
        assert!(names.contains(&"lstm.layer2.peephole_output".to_string()));
    }

    #[test]
    fn init_respects_bounds_and_conventions() {
        let arch = ArchConfig::uniform_width(4, 3);
        let p = ModelParams::<f64>::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        p.visit("", &mut |name, kind, t| match kind {
            ParamKind::Weight => {
                let (fi, fo) = fans(name, t.shape());
                let b = (6.0 / (fi + fo) as f64).sqrt();
                assert!(t.iter().all(|v| v.abs() <= b), "{name}");
                assert!(t.iter().any(|&v| v != 0.0), "{name}");
            }
            ParamKind::NormAffine if name.ends_with("gamma") => assert!(t.iter().all(|&v| v == 1.0)),
            ParamKind::Bias if name.starts_with("lstm") => {
                let h = t.len() / 4;
                for (i, &v) in t.iter().enumerate() {
                    assert_eq!(v, if (h..2 * h).contains(&i) { 1.0 } else { 0.0 });
                }
            }
            ParamKind::Bias | ParamKind::Peephole => assert!(t.iter().all(|&v| v == 0.0), "{name}"),
            _ => {}
        });
    }

    #[test]
    fn init_is_seeded() {
        let arch = ArchConfig::uniform_width(3, 2);
        let a = ModelParams::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = ModelParams::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_class_is_rejected() {
        let arch = ArchConfig::uniform_width(3, 1);
        assert!(ModelParams::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn cast_round_trips_through_f64() {
        let arch = ArchConfig::uniform_width(3, 2);
        let a = ModelParams::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.cast::<f64>().cast::<f32>(), a);
    }
}
