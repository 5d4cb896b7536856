use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Value};
use sidn_core::attnmap::render_attention_map;
use sidn_core::checkpoint::{Checkpoint, CheckpointMeta};
use sidn_core::config::{ConfigFile, TRAIN_KEYS};
use sidn_core::dataset::{self, DatasetManifest};
use sidn_core::encoder::Mode;
use sidn_core::gradcheck::{self, GradCheckConfig, GradCheckReport};
use sidn_core::model::Variant;
use sidn_core::preprocess::{resize_to_height, RawImage, DEFAULT_MAX_PATCHES, TARGET_HEIGHT};
use sidn_core::synth::{generate_synthetic, SynthSpec};
use sidn_core::train::{self, ImageSet, MetricsRecord, TrainConfig};
use sidn_core::{Error, Result};

use crate::{AttnMapArgs, Cli, Command, EvalArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

const OTHER_KEYS: &[&str] = &[
    "threads",
    "out",
    "classes",
    "per_class",
    "min_width",
    "max_width",
    "min_height",
    "max_height",
    "noise",
    "split",
    "manifest",
    "val_manifest",
    "metrics",
    "log_every",
    "model",
    "image",
    "module",
    "samples",
    "tolerance",
];

/// Flag values layered over the configuration file.
struct Settings {
    file: ConfigFile,
    seed: Option<u64>,
}

impl Settings {
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file.get(key),
        }
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| Error::Usage(format!("--{} is required", key.replace('_', "-"))))
    }

    fn seed(&self) -> Result<u64> {
        Ok(self.pick(self.seed, "seed")?.unwrap_or(0))
    }
}

fn emit(v: Value) {
    println!("{v}");
}

pub fn run(cli: Cli) -> Result<u8> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let allowed: Vec<&str> = TRAIN_KEYS.iter().chain(OTHER_KEYS).copied().collect();
    file.check_keys(&allowed)?;
    let settings = Settings { file, seed: cli.seed };

    let threads = settings.pick(cli.threads, "threads")?.unwrap_or(1);
    if threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;

    match cli.command {
        Command::SynthData(a) => synth_data(&settings, a),
        Command::Train(a) => train_cmd(&settings, a),
        Command::Eval(a) => eval_cmd(&settings, a),
        Command::Predict(a) => predict_cmd(&settings, a),
        Command::AttnMap(a) => attn_map_cmd(&settings, a),
        Command::Gradcheck(a) => gradcheck_cmd(&settings, a),
    }
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Usage(format!("--split `{s}`: {e}")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Usage(format!("--split expects three comma-separated ratios, got `{s}`"))),
    }
}

fn synth_data(s: &Settings, a: SynthArgs) -> Result<u8> {
    let out: PathBuf = s.require(a.out, "out")?;
    let classes = s.pick(a.classes, "classes")?.unwrap_or(3);
    let per_class = s.pick(a.per_class, "per_class")?.unwrap_or(20);
    let mut spec = SynthSpec::new(classes, per_class, s.seed()?);
    spec.width_range.0 = s.pick(a.min_width, "min_width")?.unwrap_or(spec.width_range.0);
    spec.width_range.1 = s.pick(a.max_width, "max_width")?.unwrap_or(spec.width_range.1);
    spec.height_range.0 = s.pick(a.min_height, "min_height")?.unwrap_or(spec.height_range.0);
    spec.height_range.1 = s.pick(a.max_height, "max_height")?.unwrap_or(spec.height_range.1);
    spec.noise = s.pick(a.noise, "noise")?.unwrap_or(spec.noise);
    let split = s.pick(a.split, "split")?.map(|r: String| parse_ratios(&r)).transpose()?;
    spec.validate()?;

    eprintln!("rendering {} images into {}", classes * per_class, out.display());
    let manifest = generate_synthetic(&spec, &out)?;
    let mut record = json!({
        "manifest": out.join("manifest.tsv"),
        "images": manifest.len(),
        "classes": manifest.class_table,
    });
    if let Some(ratios) = split {
        let parts = dataset::split(&manifest, ratios, s.seed()?)?;
        let mut written = serde_json::Map::new();
        for (name, part) in [("train", &parts.train), ("val", &parts.validation), ("test", &parts.test)] {
            let path = out.join(format!("{name}.tsv"));
            part.save(&path)?;
            written.insert(name.into(), json!({ "manifest": path, "images": part.len() }));
        }
        record["splits"] = Value::Object(written);
    }
    emit(record);
    Ok(0)
}

fn train_config(s: &Settings, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    s.file.apply_train(&mut cfg)?;
    macro_rules! flag {
        ($flag:expr => $field:ident) => {
            if let Some(v) = $flag {
                cfg.$field = v;
            }
        };
    }
    flag!(a.iters => max_iterations);
    flag!(a.learning_rate => learning_rate);
    flag!(a.batch_size => batch_size);
    flag!(a.weight_decay => weight_decay);
    flag!(a.clip_norm => clip_norm);
    flag!(a.max_patches => max_patches);
    flag!(a.channels => channels);
    flag!(a.eval_every => eval_every);
    flag!(s.seed => seed);
    if let Some(v) = &a.variant {
        cfg.variant = v.parse()?;
    }
    if let Some(v) = &a.arch {
        cfg.arch = v.parse()?;
    }
    if a.augment {
        cfg.augment = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(s: &Settings, a: TrainArgs) -> Result<u8> {
    let cfg = train_config(s, &a)?;
    let manifest_path: PathBuf = s.require(a.manifest.clone(), "manifest")?;
    let out: PathBuf = s.require(a.out.clone(), "out")?;
    let metrics_path = s
        .pick(a.metrics.clone(), "metrics")?
        .unwrap_or_else(|| out.with_extension("metrics.jsonl"));
    let log_every = s.pick(a.log_every, "log_every")?.unwrap_or(0);

    let manifest = DatasetManifest::load(&manifest_path)?;
    if let Some(n) = s.pick(a.classes, "classes")? {
        if n != manifest.n_classes() {
            return Err(Error::Config(format!(
                "--classes {n} but the manifest has {} classes",
                manifest.n_classes()
            )));
        }
    }
    let train_set = ImageSet::load(&manifest, cfg.channels)?;
    let validation = match s.pick::<PathBuf>(a.val_manifest.clone(), "val_manifest")? {
        Some(m) => {
            let mut v = ImageSet::load(&DatasetManifest::load(&m)?, cfg.channels)?;
            relabel(&mut v, &train_set.class_table)?;
            Some(v)
        }
        None => None,
    };
    eprintln!(
        "training {} on {} images, {} classes, {} iterations",
        cfg.variant,
        train_set.len(),
        train_set.n_classes(),
        cfg.max_iterations
    );

    let mut log = BufWriter::new(File::create(&metrics_path)?);
    let mut io_error: Option<std::io::Error> = None;
    let every = if log_every == 0 { (cfg.max_iterations / 20).max(1) } else { log_every };
    let mut on_record = |r: &MetricsRecord| {
        if io_error.is_none() {
            let line = serde_json::to_string(r).expect("metrics serialize");
            if let Err(e) = writeln!(log, "{line}") {
                io_error = Some(e);
            }
        }
        if (r.iteration + 1) % every == 0 {
            let eval = r.eval_accuracy.map(|v| format!(" val {v:.3}")).unwrap_or_default();
            eprintln!("iter {:>6} loss {:.4} acc {:.3}{eval}", r.iteration + 1, r.loss, r.accuracy);
        }
    };
    let outcome = train::train(&train_set, validation.as_ref(), &cfg, &mut on_record)?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    log.flush()?;

    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            class_table: train_set.class_table.clone(),
            arch: outcome.params.arch.clone(),
            train_config: Some(cfg.clone()),
            pixel_mean: outcome.pixel_mean.clone(),
            iteration: cfg.max_iterations,
            adam_step: Some(outcome.adam.step),
        },
        params: outcome.params,
        adam: Some(outcome.adam),
    };
    ckpt.save(&out)?;
    let last = outcome.log.last();
    emit(json!({
        "checkpoint": out,
        "metrics": metrics_path,
        "iterations": cfg.max_iterations,
        "variant": cfg.variant.to_string(),
        "final_loss": last.map(|r| r.loss),
        "final_batch_accuracy": last.map(|r| r.accuracy),
    }));
    Ok(0)
}

/// Maps the set's labels onto `table` by class name.
fn relabel(set: &mut ImageSet, table: &[String]) -> Result<()> {
    let map = set
        .class_table
        .iter()
        .map(|name| {
            table
                .iter()
                .position(|t| t == name)
                .ok_or_else(|| Error::InvalidInput(format!("class `{name}` is not known to the model")))
        })
        .collect::<Result<Vec<_>>>()?;
    for l in &mut set.labels {
        *l = map[*l];
    }
    set.class_table = table.to_vec();
    Ok(())
}

fn max_patches(meta: &CheckpointMeta) -> usize {
    meta.train_config.as_ref().map_or(DEFAULT_MAX_PATCHES, |c| c.max_patches)
}

fn eval_cmd(s: &Settings, a: EvalArgs) -> Result<u8> {
    let model: PathBuf = s.require(a.model, "model")?;
    let manifest: PathBuf = s.require(a.manifest, "manifest")?;
    let ckpt = Checkpoint::load(&model)?;
    let mut set = ImageSet::load(&DatasetManifest::load(&manifest)?, ckpt.params.arch.channels)?;
    relabel(&mut set, &ckpt.meta.class_table)?;
    let report = train::evaluate(&ckpt.params, &set, &ckpt.meta.pixel_mean, max_patches(&ckpt.meta), s.seed()?)?;

    eprintln!("accuracy {:.4} over {} images", report.accuracy, report.n_samples);
    let rates = train::confusion_rates(&report.confusion);
    for (name, row) in ckpt.meta.class_table.iter().zip(rates.outer_iter()) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
        eprintln!("  {name:>12} {}", cells.join(" "));
    }
    let per_class: serde_json::Map<String, Value> = ckpt
        .meta
        .class_table
        .iter()
        .zip(&report.per_class_accuracy)
        .map(|(n, a)| (n.clone(), json!(a)))
        .collect();
    emit(json!({
        "images": report.n_samples,
        "accuracy": report.accuracy,
        "nll": report.nll,
        "per_class_accuracy": per_class,
        "confusion": report.confusion,
        "classes": ckpt.meta.class_table,
    }));
    Ok(0)
}

fn load_image(path: &Path, channels: usize) -> Result<sidn_core::preprocess::NormalizedImage> {
    resize_to_height(&RawImage::load(path, channels)?, TARGET_HEIGHT)
}

fn predict_cmd(s: &Settings, a: PredictArgs) -> Result<u8> {
    let model: PathBuf = s.require(a.model, "model")?;
    let image: PathBuf = s.require(a.image, "image")?;
    let ckpt = Checkpoint::load(&model)?;
    let img = load_image(&image, ckpt.params.arch.channels)?;
    let pred = train::predict(&ckpt.params, &img, &ckpt.meta.pixel_mean, max_patches(&ckpt.meta), s.seed()?)?;
    emit(json!({
        "image": image,
        "class": ckpt.meta.class_table[pred.class],
        "class_index": pred.class,
        "z": pred.z,
    }));
    Ok(0)
}

fn attn_map_cmd(s: &Settings, a: AttnMapArgs) -> Result<u8> {
    let model: PathBuf = s.require(a.model, "model")?;
    let image: PathBuf = s.require(a.image, "image")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let ckpt = Checkpoint::load(&model)?;
    let img = load_image(&image, ckpt.params.arch.channels)?;
    let (pred, map) = render_attention_map(
        &ckpt.params,
        &img,
        &ckpt.meta.pixel_mean,
        max_patches(&ckpt.meta),
        s.seed()?,
        &out,
    )?;
    emit(json!({
        "image": image,
        "out": out,
        "height": map.height,
        "width": map.width,
        "class": ckpt.meta.class_table[pred.class],
        "attention": pred.attention,
        "origins": pred.origins,
    }));
    Ok(0)
}

fn report_json(check: &str, r: &GradCheckReport) -> Value {
    json!({
        "check": check,
        "passed": r.passed,
        "max_rel_error": r.max_rel_error,
        "tolerance": r.tolerance,
        "samples": r.entries.len(),
        "kinks_skipped": r.kinks_skipped,
        "floor": r.floor,
        "groups": r.groups(),
        "worst": r.worst(5),
    })
}

fn gradcheck_cmd(s: &Settings, a: GradcheckArgs) -> Result<u8> {
    let module = s.pick(a.module, "module")?.unwrap_or_else(|| "model".to_string());
    let samples = s.pick(a.samples, "samples")?.unwrap_or(200);
    let tolerance = s.pick(a.tolerance, "tolerance")?;
    let seed = s.seed()?;
    let variant: Variant = match s.pick::<String>(a.variant, "variant")? {
        Some(v) => v.parse()?,
        None => Variant::Full,
    };
    let wanted: Vec<&str> = match module.as_str() {
        "all" => vec!["model", "encoder", "lstm", "attention", "fusion"],
        m @ ("model" | "encoder" | "lstm" | "attention" | "fusion") => vec![m],
        other => return Err(Error::Usage(format!("unknown gradcheck module `{other}`"))),
    };
    let module_tol = tolerance.unwrap_or(1e-4);
    let mut all_passed = true;
    for m in wanted {
        let runs: Vec<(String, GradCheckReport)> = match m {
            "model" => {
                let cfg = GradCheckConfig {
                    seed,
                    min_samples: samples,
                    tolerance: tolerance.unwrap_or(1e-3),
                    variant,
                    ..Default::default()
                };
                vec![("model".into(), gradcheck::gradient_check(&cfg)?)]
            }
            "encoder" => vec![
                ("encoder.train".into(), gradcheck::check_encoder(seed, Mode::Train, samples, module_tol)?),
                ("encoder.eval".into(), gradcheck::check_encoder(seed, Mode::Eval, samples, module_tol)?),
            ],
            "lstm" => vec![("lstm".into(), gradcheck::check_lstm(seed, samples, module_tol)?)],
            "attention" => vec![("attention".into(), gradcheck::check_attention(seed, samples, module_tol)?)],
            _ => vec![("fusion".into(), gradcheck::check_fusion(seed, samples, module_tol)?)],
        };
        for (name, report) in runs {
            eprintln!(
                "{name}: {} ({} samples, max rel error {:.2e})",
                if report.passed { "PASS" } else { "FAIL" },
                report.entries.len(),
                report.max_rel_error
            );
            all_passed &= report.passed;
            emit(report_json(&name, &report));
        }
    }
    Ok(if all_passed { 0 } else { 3 })
}
