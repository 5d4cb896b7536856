//! Training loop, evaluation and prediction on decoded image sets.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::head;
use crate::model::{self, ArchConfig, Batch, ForwardTrace, ModelParams, Variant};
use crate::optim::{self, AdamConfig, AdamState};
use crate::preprocess::{self, NormalizedImage, PatchSequence, RawImage, DEFAULT_MAX_PATCHES, TARGET_HEIGHT};

/// Layer-width preset; see [`ArchConfig::standard`] and
/// [`ArchConfig::compact`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchPreset {
    Standard,
    Compact,
}

impl fmt::Display for ArchPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchPreset::Standard => "standard",
            ArchPreset::Compact => "compact",
        })
    }
}

impl FromStr for ArchPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ArchPreset::Standard),
            "compact" => Ok(ArchPreset::Compact),
            other => Err(Error::Config(format!("unknown architecture preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub max_patches: usize,
    pub seed: u64,
    pub variant: Variant,
    pub arch: ArchPreset,
    pub channels: usize,
    /// Brightness jitter of ±10% and a horizontal shift of up to ±2 pixels.
    pub augment: bool,
    /// Validation accuracy is logged every this many iterations (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_iterations: 20_000,
            weight_decay: 5e-4,
            clip_norm: 5.0,
            max_patches: DEFAULT_MAX_PATCHES,
            seed: 0,
            variant: Variant::Full,
            arch: ArchPreset::Standard,
            channels: 3,
            augment: false,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate");
        }
        if self.batch_size == 0 {
            return bad("batch size");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm");
        }
        if self.max_patches == 0 {
            return bad("patch cap");
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!("unsupported channel count {}", self.channels)));
        }
        Ok(())
    }

    pub fn arch_config(&self, n_classes: usize) -> ArchConfig {
        let base = match self.arch {
            ArchPreset::Standard => ArchConfig::standard(n_classes),
            ArchPreset::Compact => ArchConfig::compact(n_classes),
        };
        ArchConfig {
            channels: self.channels,
            ..base.with_variant(self.variant)
        }
    }
}

/// Height-normalized images held in memory with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub images: Vec<NormalizedImage>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub class_table: Vec<String>,
}

impl ImageSet {
    pub fn load(manifest: &DatasetManifest, channels: usize) -> Result<Self> {
        let images = manifest
            .records
            .par_iter()
            .map(|r| {
                let raw = RawImage::load(manifest.resolve(r), channels)?;
                preprocess::resize_to_height(&raw, TARGET_HEIGHT)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            labels: manifest.labels(),
            ids: manifest.records.iter().map(|r| r.path.display().to_string()).collect(),
            class_table: manifest.class_table.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_table.len()
    }
}

/// Per-channel mean over every pixel of every image.
pub fn pixel_mean(set: &ImageSet) -> Result<Vec<f32>> {
    let c = set.images.first().map(|i| i.channels).ok_or_else(|| Error::InvalidInput("empty image set".into()))?;
    let mut sum = vec![0f64; c];
    let mut count = 0usize;
    for img in &set.images {
        for px in img.data.chunks_exact(c) {
            for (s, &v) in sum.iter_mut().zip(px) {
                *s += f64::from(v);
            }
        }
        count += img.height * img.width;
    }
    Ok(sum.into_iter().map(|s| (s / count as f64) as f32).collect())
}

/// Brightness scaled by a factor in [0.9, 1.1], content shifted horizontally
/// by up to two pixels with linear interpolation and edge replication.
pub fn augment<R: Rng + ?Sized>(img: &NormalizedImage, rng: &mut R) -> NormalizedImage {
    let gain = rng.random_range(0.9f32..=1.1);
    let shift = rng.random_range(-2.0f32..=2.0);
    let (w, c) = (img.width, img.channels);
    let mut data = vec![0f32; img.data.len()];
    for y in 0..img.height {
        for x in 0..w {
            let src = (x as f32 - shift).clamp(0.0, (w - 1) as f32);
            let x0 = src.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let t = src - x0 as f32;
            for ch in 0..c {
                let v = img.get(y, x0, ch) * (1.0 - t) + img.get(y, x1, ch) * t;
                data[(y * w + x) * c + ch] = (v * gain).clamp(0.0, 1.0);
            }
        }
    }
    NormalizedImage { data, ..img.clone() }
}

fn sequence_for<R: Rng + ?Sized>(img: &NormalizedImage, id: &str, max_patches: usize, rng: &mut R) -> Result<PatchSequence> {
    preprocess::cap_patches(preprocess::extract_patches(img, id)?, max_patches, rng)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    /// Batch NLL plus weight decay.
    pub loss: f64,
    pub nll: f64,
    /// Training-batch accuracy.
    pub accuracy: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub pixel_mean: Vec<f32>,
    pub log: Vec<MetricsRecord>,
}

/// Endless reshuffled pass over `0..n`.
struct EpochSampler {
    order: Vec<usize>,
    next: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            next: n,
        }
    }

    fn take<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.next == self.order.len() {
                self.order.shuffle(rng);
                self.next = 0;
            }
            out.push(self.order[self.next]);
            self.next += 1;
        }
        out
    }
}

fn non_finite_fault(params: &ModelParams<f32>, fallback: &str) -> Error {
    Error::NumericFault(params.first_non_finite().unwrap_or_else(|| fallback.to_string()))
}

/// Trains a fresh model on `train_set`, calling `on_record` after every
/// iteration. Batches larger than the set are shrunk to the set size.
pub fn train(
    train_set: &ImageSet,
    validation: Option<&ImageSet>,
    cfg: &TrainConfig,
    on_record: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if train_set.n_classes() < 2 {
        return Err(Error::InvalidInput("training needs at least 2 classes".into()));
    }
    let arch = cfg.arch_config(train_set.n_classes());
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::<f32>::init(&arch, &mut init_rng)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mean = pixel_mean(train_set)?;
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let lambda = cfg.weight_decay as f32;
    let batch_size = cfg.batch_size.min(train_set.len());
    let mut sampler = EpochSampler::new(train_set.len());
    let mut log = Vec::with_capacity(cfg.max_iterations);

    for iteration in 0..cfg.max_iterations {
        let picks = sampler.take(batch_size, &mut data_rng);
        let mut seqs = Vec::with_capacity(picks.len());
        for &i in &picks {
            let img = &train_set.images[i];
            let seq = if cfg.augment {
                sequence_for(&augment(img, &mut data_rng), &train_set.ids[i], cfg.max_patches, &mut data_rng)?
            } else {
                sequence_for(img, &train_set.ids[i], cfg.max_patches, &mut data_rng)?
            };
            seqs.push(seq);
        }
        let refs: Vec<&PatchSequence> = seqs.iter().collect();
        let batch = Batch::<f32>::from_sequences(&refs, &mean)?;
        let labels: Vec<usize> = picks.iter().map(|&i| train_set.labels[i]).collect();

        let trace = model::forward_batch(&mut params, &batch, Mode::Train, Some(&mut dropout_rng))?;
        let nll = model::batch_nll(&trace, &labels)?;
        let loss = nll + lambda * head::squared_weight_norm(&params);
        if !loss.is_finite() {
            return Err(non_finite_fault(&params, "loss"));
        }
        let correct = trace
            .samples
            .iter()
            .zip(&labels)
            .filter(|(s, &l)| head::argmax_class(s.z.view()) == l)
            .count();

        let mut grad = params.zeros_like();
        model::backward_batch(&params, &batch, &trace, &labels, &mut grad, false);
        model::add_weight_decay(&params, &mut grad, lambda);
        if let Some(name) = grad.first_non_finite() {
            return Err(Error::NumericFault(format!("gradient of {name}")));
        }
        let grad_norm = optim::clip_gradients(&mut grad, cfg.clip_norm as f32)?;
        optim::adam_step(&mut params, &grad, &mut adam, &adam_cfg)?;
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NumericFault(name));
        }

        let eval_accuracy = match validation {
            Some(v) if cfg.eval_every > 0 && ((iteration + 1) % cfg.eval_every == 0 || iteration + 1 == cfg.max_iterations) => {
                Some(evaluate(&params, v, &mean, cfg.max_patches, cfg.seed)?.accuracy)
            }
            _ => None,
        };
        let record = MetricsRecord {
            iteration,
            loss: f64::from(loss),
            nll: f64::from(nll),
            accuracy: correct as f64 / labels.len() as f64,
            grad_norm: f64::from(grad_norm),
            eval_accuracy,
        };
        on_record(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        params,
        adam,
        pixel_mean: mean,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub accuracy: f64,
    /// Mean NLL over the set (no regularization).
    pub nll: f64,
    /// `None` for classes absent from the set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

const EVAL_CHUNK: usize = 16;

/// Eval-mode forward passes over every image. Images with more than
/// `max_patches` patches are capped with a generator seeded from `seed`.
pub fn infer(
    params: &ModelParams<f32>,
    images: &[&NormalizedImage],
    pixel_mean: &[f32],
    max_patches: usize,
    seed: u64,
) -> Result<Vec<ForwardTrace<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut local = params.clone();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let seqs = chunk
            .iter()
            .map(|img| sequence_for(img, "", max_patches, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PatchSequence> = seqs.iter().collect();
        let batch = Batch::<f32>::from_sequences(&refs, pixel_mean)?;
        let trace = model::forward_batch::<f32, ChaCha8Rng>(&mut local, &batch, Mode::Eval, None)?;
        out.extend(trace.samples);
    }
    Ok(out)
}

pub fn evaluate(params: &ModelParams<f32>, set: &ImageSet, pixel_mean: &[f32], max_patches: usize, seed: u64) -> Result<EvalReport> {
    let n = params.arch.n_classes;
    if set.n_classes() > n {
        return Err(Error::InvalidInput(format!(
            "dataset has {} classes, model has {n}",
            set.n_classes()
        )));
    }
    if set.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let refs: Vec<&NormalizedImage> = set.images.iter().collect();
    let traces = infer(params, &refs, pixel_mean, max_patches, seed)?;
    let mut confusion = vec![vec![0usize; n]; n];
    let mut pairs = Vec::with_capacity(traces.len());
    for (t, &label) in traces.iter().zip(&set.labels) {
        confusion[label][head::argmax_class(t.z.view())] += 1;
        pairs.push((t.z.view(), label));
    }
    let nll = f64::from(head::nll(&pairs)?);
    let correct: usize = (0..n).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    Ok(EvalReport {
        n_samples: set.len(),
        accuracy: correct as f64 / set.len() as f64,
        nll,
        per_class_accuracy,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub class: usize,
    pub z: Vec<f32>,
    /// Attention weight per patch, aligned with `origins`.
    pub attention: Vec<f32>,
    pub origins: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
}

/// Classifies one normalized image, keeping its patch layout for attention
/// rendering.
pub fn predict(params: &ModelParams<f32>, img: &NormalizedImage, pixel_mean: &[f32], max_patches: usize, seed: u64) -> Result<Prediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let seq = sequence_for(img, "", max_patches, &mut rng)?;
    let origins = seq.patches.iter().map(|p| (p.origin_x, p.origin_y)).collect();
    let batch = Batch::<f32>::from_sequences(&[&seq], pixel_mean)?;
    let mut local = params.clone();
    let trace = model::forward_batch::<f32, ChaCha8Rng>(&mut local, &batch, Mode::Eval, None)?;
    let t = &trace.samples[0];
    Ok(Prediction {
        class: head::argmax_class(t.z.view()),
        z: t.z.to_vec(),
        attention: t.attention.p.to_vec(),
        origins,
        height: img.height,
        width: img.width,
    })
}

/// Row-normalized confusion matrix, for display.
pub fn confusion_rates(confusion: &[Vec<usize>]) -> Array2<f64> {
    let n = confusion.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let total: usize = confusion[i].iter().sum();
        if total == 0 {
            0.0
        } else {
            confusion[i][j] as f64 / total as f64
        }
    })
}
