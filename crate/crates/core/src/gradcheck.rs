//! Central-difference verification of the analytic gradients of the whole
//! network, in 64-bit precision with batch norm in eval mode and dropout off.

use std::collections::BTreeMap;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::Mode;
use crate::error::Result;
use crate::head;
use crate::model::{self, ArchConfig, Batch, GradientSet, ModelParams, Variant};
use crate::params::{ParamKind, Parameters};
use crate::preprocess::PATCH_SIZE;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub width: usize,
    pub n_classes: usize,
    pub patches_per_sample: usize,
    pub batch_size: usize,
    /// Lower bound on the number of checked scalars; spread over every
    /// trainable tensor.
    pub min_samples: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub weight_decay: f64,
    pub variant: Variant,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 8,
            n_classes: 3,
            patches_per_sample: 3,
            batch_size: 2,
            min_samples: 200,
            epsilon: 1e-6,
            tolerance: 1e-3,
            weight_decay: 5e-4,
            variant: Variant::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Denominator floor used for every entry; see [`relative_error`].
    pub floor: f64,
    /// Candidates dropped because the `±ε` window crossed a ReLU or max-pool
    /// switch, where the central difference does not estimate the gradient.
    pub kinks_skipped: usize,
}

impl GradCheckReport {
    /// Entries sorted by decreasing relative error.
    pub fn worst(&self, k: usize) -> Vec<&GradCheckEntry> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        v.truncate(k);
        v
    }

    /// Tensor-name prefixes (`encoder`, `lstm`, ...) that were sampled.
    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self
            .entries
            .iter()
            .map(|e| e.tensor.split('.').next().unwrap_or("").to_string())
            .collect();
        g.sort();
        g.dedup();
        g
    }
}

/// Smallest denominator allowed in [`relative_error`].
pub const ABSOLUTE_FLOOR: f64 = 1e-8;
/// The denominator floor also scales with the largest sampled gradient:
/// entries this many times smaller sit at the finite-difference roundoff
/// level, e.g. gradients that batch statistics cancel exactly.
pub const SCALE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Objective value and activation pattern with `delta` added to one entry
/// of the named tensor.
type Probe<'a> = dyn Fn(&str, usize, f64) -> Result<(f64, Vec<u32>)> + 'a;

/// Draws up to `per_tensor` entries from each tensor in a random order,
/// replacing any whose difference window crosses a kink.
fn sample_and_compare(
    tensors: &[(String, usize)],
    per_tensor: usize,
    analytic: &BTreeMap<String, Vec<f64>>,
    probe: &Probe<'_>,
    epsilon: f64,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let Some((first, _)) = tensors.first() else {
        return Err(crate::Error::InvalidInput("nothing to check".into()));
    };
    let base = probe(first, 0, 0.0)?.1;
    let mut raw = Vec::new();
    let mut kinks_skipped = 0;
    for (name, len) in tensors {
        let mut order: Vec<usize> = (0..*len).collect();
        order.shuffle(rng);
        let want = per_tensor.min(*len);
        let mut taken = 0;
        for &index in order.iter().take(4 * want + 8) {
            if taken == want {
                break;
            }
            let (up, up_pattern) = probe(name, index, epsilon)?;
            let (down, down_pattern) = probe(name, index, -epsilon)?;
            if up_pattern != base || down_pattern != base {
                kinks_skipped += 1;
                continue;
            }
            raw.push((name.clone(), index, analytic[name][index], (up - down) / (2.0 * epsilon)));
            taken += 1;
        }
    }
    let scale = raw.iter().map(|e| e.2.abs()).fold(0.0, f64::max);
    let floor = ABSOLUTE_FLOOR.max(SCALE_FLOOR * scale);
    let entries: Vec<GradCheckEntry> = raw
        .into_iter()
        .map(|(tensor, index, analytic, numeric)| GradCheckEntry {
            rel_error: relative_error(analytic, numeric, floor),
            tensor,
            index,
            analytic,
            numeric,
        })
        .collect();
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= tolerance,
        entries,
        max_rel_error,
        tolerance,
        floor,
        kinks_skipped,
    })
}

fn flatten<P: Parameters<f64> + ?Sized>(p: &P) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    p.visit("", &mut |name, _, t| {
        out.insert(name.to_string(), t.iter().copied().collect());
    });
    out
}

fn perturbed<P: Parameters<f64> + Clone>(p: &P, name: &str, index: usize, delta: f64) -> P {
    let mut q = p.clone();
    q.visit_mut("", &mut |n, _, mut t| {
        if n == name {
            *t.iter_mut().nth(index).expect("index in range") += delta;
        }
    });
    q
}

/// A random model with every parameter group perturbed away from its
/// initial convention (non-zero biases, peepholes, batch-norm statistics) so
/// all gradient paths carry signal.
pub fn random_model(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams<f64>> {
    let mut params = ModelParams::<f64>::init(arch, rng)?;
    params.visit_mut("", &mut |name, kind, mut t| match kind {
        ParamKind::Weight => {}
        ParamKind::RunningStat if name.ends_with("running_var") => t.mapv_inplace(|_| rng.random_range(0.5..1.5)),
        ParamKind::NormAffine if name.ends_with("gamma") => t.mapv_inplace(|_| rng.random_range(0.5..1.5)),
        _ => t.mapv_inplace(|_| rng.random_range(-0.3..0.3)),
    });
    Ok(params)
}

fn random_batch(arch: &ArchConfig, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> (Batch<f64>, Vec<usize>) {
    let p = cfg.patches_per_sample * cfg.batch_size;
    let patches = Array4::from_shape_simple_fn((p, arch.channels, PATCH_SIZE, PATCH_SIZE), || rng.random_range(-0.5..0.5));
    let offsets = (0..=cfg.batch_size).map(|i| i * cfg.patches_per_sample).collect();
    let labels = (0..cfg.batch_size).map(|_| rng.random_range(0..arch.n_classes)).collect();
    (Batch { patches, offsets }, labels)
}

/// Batch-mean NLL plus weight decay in eval mode, with the encoder's
/// activation pattern.
fn objective_with_pattern(params: &ModelParams<f64>, batch: &Batch<f64>, labels: &[usize], lambda: f64) -> Result<(f64, Vec<u32>)> {
    let mut local = params.clone();
    let trace = model::forward_batch::<f64, ChaCha8Rng>(&mut local, batch, Mode::Eval, None)?;
    let value = model::batch_nll(&trace, labels)? + lambda * head::squared_weight_norm(params);
    Ok((value, trace.encoder.activation_pattern(&params.encoder)))
}

/// Batch-mean NLL plus weight decay in eval mode.
pub fn objective(params: &ModelParams<f64>, batch: &Batch<f64>, labels: &[usize], lambda: f64) -> Result<f64> {
    Ok(objective_with_pattern(params, batch, labels, lambda)?.0)
}

/// Analytic gradient of [`objective`].
pub fn analytic_gradient(params: &ModelParams<f64>, batch: &Batch<f64>, labels: &[usize], lambda: f64) -> Result<GradientSet<f64>> {
    let mut local = params.clone();
    let trace = model::forward_batch::<f64, ChaCha8Rng>(&mut local, batch, Mode::Eval, None)?;
    let mut grad = params.zeros_like();
    model::backward_batch(params, batch, &trace, labels, &mut grad, false);
    model::add_weight_decay(params, &mut grad, lambda);
    Ok(grad)
}

/// Every trainable tensor the variant uses, with its length.
pub fn checked_tensors(params: &ModelParams<f64>) -> Vec<(String, usize)> {
    let variant = params.arch.variant;
    let mut tensors = Vec::new();
    params.visit("", &mut |name, kind, t| {
        let unused = (!variant.uses_attention() && name.starts_with("attention."))
            || (variant.concatenates() && name.contains("_scorer."));
        if kind.is_trainable() && !unused {
            tensors.push((name.to_string(), t.len()));
        }
    });
    tensors
}

/// Runs the check, letting `tamper` edit the analytic gradient first (used to
/// confirm a broken backward pass is caught).
pub fn gradient_check_with(cfg: &GradCheckConfig, tamper: &dyn Fn(&mut GradientSet<f64>)) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = ArchConfig::uniform_width(cfg.width, cfg.n_classes).with_variant(cfg.variant);
    let params = random_model(&arch, &mut rng)?;
    let (batch, labels) = random_batch(&arch, cfg, &mut rng);
    let mut grad = analytic_gradient(&params, &batch, &labels, cfg.weight_decay)?;
    tamper(&mut grad);
    let tensors = checked_tensors(&params);
    let per_tensor = cfg.min_samples.div_ceil(tensors.len()).max(1);
    let probe = |name: &str, index: usize, delta: f64| {
        objective_with_pattern(&perturbed(&params, name, index, delta), &batch, &labels, cfg.weight_decay)
    };
    sample_and_compare(&tensors, per_tensor, &flatten(&grad), &probe, cfg.epsilon, cfg.tolerance, &mut rng)
}

pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    gradient_check_with(cfg, &|_| {})
}

const MODULE_EPSILON: f64 = 1e-5;

/// A module's parameters together with its differentiable inputs, so both
/// can be perturbed through one [`Parameters`] walk.
#[derive(Debug, Clone)]
struct Bundle<M> {
    module: M,
    inputs: Vec<(&'static str, ndarray::ArrayD<f64>)>,
}

impl<M: Parameters<f64>> Parameters<f64> for Bundle<M> {
    fn visit(&self, prefix: &str, f: &mut crate::params::Visitor<'_, f64>) {
        self.module.visit(prefix, f);
        for (name, t) in &self.inputs {
            f(&format!("input.{name}"), ParamKind::Weight, t.view());
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut crate::params::VisitorMut<'_, f64>) {
        self.module.visit_mut(prefix, f);
        for (name, t) in &mut self.inputs {
            f(&format!("input.{name}"), ParamKind::Weight, t.view_mut());
        }
    }
}

impl<M> Bundle<M> {
    fn input(&self, i: usize) -> &ndarray::ArrayD<f64> {
        &self.inputs[i].1
    }
}

/// `objective` returns the value and an activation pattern (empty for
/// smooth modules).
fn check_bundle<M: Parameters<f64> + Clone>(
    point: &Bundle<M>,
    grad: &Bundle<M>,
    objective: &dyn Fn(&Bundle<M>) -> Result<(f64, Vec<u32>)>,
    skip: &dyn Fn(&str) -> bool,
    min_samples: usize,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let mut tensors = Vec::new();
    point.visit("", &mut |name, kind, t| {
        if kind.is_trainable() && !skip(name) {
            tensors.push((name.to_string(), t.len()));
        }
    });
    let per_tensor = min_samples.div_ceil(tensors.len()).max(1);
    let probe = |name: &str, index: usize, delta: f64| objective(&perturbed(point, name, index, delta));
    sample_and_compare(&tensors, per_tensor, &flatten(grad), &probe, MODULE_EPSILON, tolerance, rng)
}

fn uniform_array(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ndarray::ArrayD<f64> {
    ndarray::ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || rng.random_range(lo..hi))
}

fn randomize<P: Parameters<f64>>(p: &mut P, scale: f64, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |name, kind, mut t| match kind {
        ParamKind::RunningStat if name.ends_with("running_var") => t.mapv_inplace(|_| rng.random_range(0.5..1.5)),
        ParamKind::NormAffine if name.ends_with("gamma") => t.mapv_inplace(|_| rng.random_range(0.5..1.5)),
        _ => t.mapv_inplace(|_| rng.random_range(-scale..scale)),
    });
}

/// Encoder with 8/16/24/32 filters and dropout off. In train mode the batch
/// statistics cancel the convolution biases exactly, so those are skipped
/// there; eval mode covers them.
pub fn check_encoder(seed: u64, mode: Mode, min_samples: usize, tolerance: f64) -> Result<GradCheckReport> {
    use crate::encoder::{encode_batch, encode_batch_backward, EncoderParams, EncoderShape};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = EncoderShape {
        channels: 3,
        conv_widths: [8, 16, 24, 32],
        fc1: 16,
        output: 8,
    };
    let mut enc = EncoderParams::<f64>::zeros(&shape);
    randomize(&mut enc, 0.3, &mut rng);
    let patches = uniform_array(&[3, 3, PATCH_SIZE, PATCH_SIZE], -1.0, 1.0, &mut rng);
    let probe = uniform_array(&[3, 8], -1.0, 1.0, &mut rng)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d");
    let point = Bundle {
        module: enc,
        inputs: vec![("patches", patches)],
    };
    let forward = |b: &Bundle<EncoderParams<f64>>| -> Result<(ndarray::Array2<f64>, crate::encoder::EncoderTrace<f64>)> {
        let mut m = b.module.clone();
        let x = b.input(0).view().into_dimensionality::<ndarray::Ix4>().expect("4-d");
        encode_batch::<f64, ChaCha8Rng>(x, &mut m, mode, None)
    };
    let (_, trace) = forward(&point)?;
    let mut grad_enc = point.module.zeros_like();
    let dx = encode_batch_backward(&trace, probe.view(), &point.module, &mut grad_enc, true).expect("input grad");
    let grad = Bundle {
        module: grad_enc,
        inputs: vec![("patches", dx.into_dyn())],
    };
    let objective = |b: &Bundle<EncoderParams<f64>>| -> Result<(f64, Vec<u32>)> {
        let (out, trace) = forward(b)?;
        Ok(((&out * &probe).sum(), trace.activation_pattern(&b.module)))
    };
    check_bundle(&point, &grad, &objective, &|n: &str| mode == Mode::Train && n.starts_with("conv") && n.ends_with(".bias"), min_samples, tolerance, &mut rng)
}

/// Two-step stack with 8 hidden units, probed through every hidden output
/// and the final top cell.
pub fn check_lstm(seed: u64, min_samples: usize, tolerance: f64) -> Result<GradCheckReport> {
    use crate::lstm::{run_stack, run_stack_backward, StackParams};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stack = StackParams::<f64>::zeros(6, 8);
    randomize(&mut stack, 0.5, &mut rng);
    let features = uniform_array(&[2, 6], -1.0, 1.0, &mut rng);
    let probe_h = uniform_array(&[2, 8], -1.0, 1.0, &mut rng)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d");
    let probe_c = uniform_array(&[8], -1.0, 1.0, &mut rng)
        .into_dimensionality::<ndarray::Ix1>()
        .expect("1-d");
    let point = Bundle {
        module: stack,
        inputs: vec![("features", features)],
    };
    let run = |b: &Bundle<StackParams<f64>>| {
        let x = b.input(0).view().into_dimensionality::<ndarray::Ix2>().expect("2-d");
        run_stack(x, &b.module)
    };
    let out = run(&point)?;
    let mut g = point.module.clone();
    g.visit_mut("", &mut |_, _, mut t| t.fill(0.0));
    let dx = run_stack_backward(&out, probe_h.view(), probe_c.view(), &point.module, &mut g);
    let grad = Bundle {
        module: g,
        inputs: vec![("features", dx.into_dyn())],
    };
    let objective = |b: &Bundle<StackParams<f64>>| -> Result<(f64, Vec<u32>)> {
        let o = run(b)?;
        Ok(((&o.hidden_per_step * &probe_h).sum() + o.final_cell_top.dot(&probe_c), Vec::new()))
    };
    check_bundle(&point, &grad, &objective, &|_| false, min_samples, tolerance, &mut rng)
}

/// Scores and softmax weights, probed through the weights.
pub fn check_attention(seed: u64, min_samples: usize, tolerance: f64) -> Result<GradCheckReport> {
    use crate::attention::{attention_scores, attention_scores_backward, attention_weights, attention_weights_backward, AttentionParams};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut att = AttentionParams::<f64>::zeros(8, 6);
    randomize(&mut att, 0.8, &mut rng);
    let hidden = uniform_array(&[4, 8], -1.0, 1.0, &mut rng);
    let probe = uniform_array(&[4], -1.0, 1.0, &mut rng)
        .into_dimensionality::<ndarray::Ix1>()
        .expect("1-d");
    let point = Bundle {
        module: att,
        inputs: vec![("hidden", hidden)],
    };
    let mask = [false; 4];
    let h = |b: &Bundle<AttentionParams<f64>>| b.input(0).view().into_dimensionality::<ndarray::Ix2>().expect("2-d").to_owned();
    let (q, act) = attention_scores(h(&point).view(), &point.module)?;
    let w = attention_weights(q.view(), &mask)?;
    let dq = attention_weights_backward(&w, probe.view());
    let mut g = AttentionParams::zeros(8, 6);
    let dh = attention_scores_backward(h(&point).view(), &act, dq.view(), &point.module, &mut g);
    let grad = Bundle {
        module: g,
        inputs: vec![("hidden", dh.into_dyn())],
    };
    let objective = |b: &Bundle<AttentionParams<f64>>| -> Result<(f64, Vec<u32>)> {
        let (q, _) = attention_scores(h(b).view(), &b.module)?;
        Ok((attention_weights(q.view(), &mask)?.p.dot(&probe), Vec::new()))
    };
    check_bundle(&point, &grad, &objective, &|_| false, min_samples, tolerance, &mut rng)
}

/// Global projection plus dynamic fusion, probed through every fused
/// feature.
pub fn check_fusion(seed: u64, min_samples: usize, tolerance: f64) -> Result<GradCheckReport> {
    use crate::fusion::{fuse_sequence, fuse_sequence_backward, global_feature, global_feature_backward, FusionParams};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fus = FusionParams::<f64>::zeros(10, 8, 6);
    randomize(&mut fus, 0.8, &mut rng);
    let local = uniform_array(&[3, 8], -1.0, 1.0, &mut rng);
    let cell = uniform_array(&[10], -2.0, 2.0, &mut rng);
    let probe = uniform_array(&[3, 8], -1.0, 1.0, &mut rng)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d");
    let point = Bundle {
        module: fus,
        inputs: vec![("local", local), ("cell", cell)],
    };
    let views = |b: &Bundle<FusionParams<f64>>| {
        (
            b.input(0).view().into_dimensionality::<ndarray::Ix2>().expect("2-d").to_owned(),
            b.input(1).view().into_dimensionality::<ndarray::Ix1>().expect("1-d").to_owned(),
        )
    };
    let (lf, c) = views(&point);
    let gf = global_feature(c.view(), &point.module)?;
    let (_, trace) = fuse_sequence(lf.view(), gf.view(), &point.module);
    let mut g = FusionParams::zeros(10, 8, 6);
    let (d_lf, d_gf) = fuse_sequence_backward(lf.view(), gf.view(), &trace, probe.view(), &point.module, &mut g);
    let d_c = global_feature_backward(c.view(), &gf, d_gf.view(), &point.module, &mut g);
    let grad = Bundle {
        module: g,
        inputs: vec![("local", d_lf.into_dyn()), ("cell", d_c.into_dyn())],
    };
    let objective = |b: &Bundle<FusionParams<f64>>| -> Result<(f64, Vec<u32>)> {
        let (lf, c) = views(b);
        let gf = global_feature(c.view(), &b.module)?;
        Ok(((&fuse_sequence(lf.view(), gf.view(), &b.module).0 * &probe).sum(), Vec::new()))
    };
    check_bundle(&point, &grad, &objective, &|_| false, min_samples, tolerance, &mut rng)
}
