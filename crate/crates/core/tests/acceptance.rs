//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p sidn-core --test acceptance -- 1 2 10`.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array1, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidn_core::checkpoint::{Checkpoint, CheckpointMeta};
use sidn_core::encoder::{encode_batch, Mode};
use sidn_core::gradcheck::{self, random_model, GradCheckConfig, GradCheckReport};
use sidn_core::model::{forward_batch, ArchConfig, Batch, ModelParams, Variant};
use sidn_core::params::describe;
use sidn_core::preprocess::{cap_patches, extract_patches, resize_to_height, PatchSequence, RawImage, DEFAULT_MAX_PATCHES};
use sidn_core::synth::{render_sample, SynthSpec};
use sidn_core::train::{evaluate, train, ArchPreset, EvalReport, ImageSet, MetricsRecord, TrainConfig};
use sidn_core::head;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

/// Corpus widths are kept narrow so a CPU run of the training criteria fits
/// its time budget.
const WIDTHS: (usize, usize) = (40, 100);

fn corpus(per_class: usize, seed: u64) -> Vec<ImageSet> {
    let mut spec = SynthSpec::new(3, per_class, seed);
    spec.width_range = WIDTHS;
    let names: Vec<String> = spec.styles.iter().map(|s| s.name.clone()).collect();
    (0..3)
        .map(|class| {
            let mut set = ImageSet {
                images: Vec::new(),
                labels: Vec::new(),
                ids: Vec::new(),
                class_table: names.clone(),
            };
            for i in 0..per_class {
                set.images.push(resize_to_height(&render_sample(&spec, class, i).unwrap(), 40).unwrap());
                set.labels.push(class);
                set.ids.push(format!("{}_{i:04}", names[class]));
            }
            set
        })
        .collect()
}

/// Concatenates `[lo, hi)` of every class.
fn take(classes: &[ImageSet], lo: usize, hi: usize) -> ImageSet {
    let mut out = ImageSet {
        images: Vec::new(),
        labels: Vec::new(),
        ids: Vec::new(),
        class_table: classes[0].class_table.clone(),
    };
    for c in classes {
        out.images.extend_from_slice(&c.images[lo..hi]);
        out.labels.extend_from_slice(&c.labels[lo..hi]);
        out.ids.extend_from_slice(&c.ids[lo..hi]);
    }
    out
}

fn desk_config(seed: u64, iterations: usize, variant: Variant) -> TrainConfig {
    TrainConfig {
        seed,
        max_iterations: iterations,
        variant,
        arch: ArchPreset::Compact,
        ..TrainConfig::default()
    }
}

fn run_training(set: &ImageSet, cfg: &TrainConfig) -> sidn_core::train::TrainOutcome {
    train(set, None, cfg, &mut |_| {}).expect("training run")
}

fn held_out(set: &ImageSet, test: &ImageSet, cfg: &TrainConfig) -> f64 {
    let out = run_training(set, cfg);
    evaluate(&out.params, test, &out.pixel_mean, cfg.max_patches, cfg.seed).unwrap().accuracy
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn within_budget(start: Instant, secs: f64) -> (bool, String) {
    let t = start.elapsed().as_secs_f64();
    (t < secs, format!("{t:.1} s of {secs:.0} s budget"))
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let arch = ArchConfig::standard(3);
    let mut params = ModelParams::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let patch = Array4::from_shape_simple_fn((1, 3, 32, 32), || rng.random_range(-0.5f32..0.5));
    let (out, trace) = encode_batch::<f32, ChaCha8Rng>(patch.view(), &mut params.encoder, Mode::Eval, None).unwrap();
    let got: Vec<Vec<usize>> = trace.shapes.iter().skip(1).map(|(_, s)| s.clone()).collect();
    let table: Vec<Vec<usize>> = vec![
        vec![96, 28, 28],
        vec![96, 15, 15],
        vec![256, 13, 13],
        vec![256, 7, 7],
        vec![384, 5, 5],
        vec![384, 3, 3],
        vec![512, 3, 3],
        vec![4096],
        vec![256],
    ];
    let (fast, time) = within_budget(start, 1.0);
    let ok = got == table && out.dim() == (1, 256) && fast;
    verdict(ok, format!("{:?}; {time}", got.iter().map(|s| s.iter().map(ToString::to_string).collect::<Vec<_>>().join("×")).collect::<Vec<_>>()))
}

fn summary(r: &GradCheckReport) -> String {
    format!("max rel {:.2e} over {} samples", r.max_rel_error, r.entries.len())
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        min_samples: 200,
        tolerance: 1e-3,
        ..GradCheckConfig::default()
    };
    let full = gradcheck::gradient_check(&cfg).unwrap();
    let shrunk = random_model(&ArchConfig::uniform_width(cfg.width, cfg.n_classes), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut groups: Vec<String> = describe(&shrunk)
        .into_iter()
        .filter(|(_, kind, _)| kind.is_trainable())
        .map(|(name, _, _)| name.split('.').next().unwrap().to_string())
        .collect();
    groups.sort();
    groups.dedup();
    let spans = full.groups() == groups;
    let mut ok = full.passed && full.entries.len() >= 200 && spans;
    let mut detail = format!("model {} [{}]", summary(&full), full.groups().join(","));

    let modules = [
        ("encoder", gradcheck::check_encoder(0, Mode::Eval, 200, 1e-4).unwrap()),
        ("lstm", gradcheck::check_lstm(0, 200, 1e-4).unwrap()),
        ("attention", gradcheck::check_attention(0, 200, 1e-4).unwrap()),
        ("fusion", gradcheck::check_fusion(0, 200, 1e-4).unwrap()),
    ];
    for (name, r) in &modules {
        ok &= r.passed;
        detail.push_str(&format!("; {name} {:.2e}", r.max_rel_error));
    }
    let (fast, time) = within_budget(start, 120.0);
    verdict(ok && fast, format!("{detail}; {time}"))
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    let mut envelope_ok = true;
    for pass in 0..1000u64 {
        let variant = [Variant::Full, Variant::Variant1, Variant::Variant2][(pass % 3) as usize];
        let n = rng.random_range(2..8);
        let arch = ArchConfig::uniform_width(8, n).with_variant(variant);
        let mut params = random_model(&arch, &mut ChaCha8Rng::seed_from_u64(pass)).unwrap();
        let width = rng.random_range(32..140);
        let pixels = (0..40 * width * 3).map(|_| rng.random::<u8>()).collect();
        let img = resize_to_height(&RawImage::new(40, width, 3, pixels).unwrap(), 40).unwrap();
        let seq = extract_patches(&img, "r").unwrap();
        let batch = Batch::<f64>::from_sequences(&[&seq], &[0.5, 0.5, 0.5]).unwrap();
        let trace = forward_batch::<f64, ChaCha8Rng>(&mut params, &batch, Mode::Eval, None).unwrap();
        let t = &trace.samples[0];
        worst = worst.max((t.attention.p.sum() - 1.0).abs());
        worst = worst.max((t.z.sum() - 1.0).abs());
        for row in t.per_patch.outer_iter() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
        if let Some(f) = &t.fusion {
            for c in f.coherence.outer_iter() {
                worst = worst.max((c[0] + c[1] - 1.0).abs());
            }
            for (phi, lf) in t.phi.outer_iter().zip(t.local.outer_iter()) {
                for ((&p, &l), &g) in phi.iter().zip(lf.iter()).zip(t.global.iter()) {
                    envelope_ok &= p >= l.min(g) - 1e-12 && p <= l.max(g) + 1e-12;
                }
            }
        }
    }
    let (fast, time) = within_budget(start, 60.0);
    verdict(worst <= 1e-6 && envelope_ok && fast, format!("max deviation {worst:.1e}; envelope held: {envelope_ok}; {time}"))
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let set = take(&corpus(10, 404), 0, 10);
    let cfg = desk_config(0, 2000, Variant::Full);
    let out = run_training(&set, &cfg);
    let report = evaluate(&out.params, &set, &out.pixel_mean, cfg.max_patches, cfg.seed).unwrap();
    let penalty = f64::from(head::squared_weight_norm(&out.params)) * cfg.weight_decay;
    let loss = report.nll + penalty;
    let (fast, time) = within_budget(start, 600.0);
    let ok = report.accuracy >= 0.99 && loss <= 0.05 + penalty && fast;
    verdict(
        ok,
        format!(
            "train accuracy {:.3}; loss {loss:.4} vs bound {:.4} (nll {:.4}); last batch loss {:.4}; {time}",
            report.accuracy,
            0.05 + penalty,
            report.nll,
            out.log.last().unwrap().loss
        ),
    )
}

/// Softmax regression on a 16-bin gray-level histogram.
fn histogram_baseline(train: &ImageSet, test: &ImageSet) -> f64 {
    let feature = |img: &sidn_core::preprocess::NormalizedImage| -> Vec<f64> {
        let mut hist = vec![0.0; 17];
        let n = (img.height * img.width) as f64;
        for px in img.data.chunks(img.channels) {
            let g = px.iter().sum::<f32>() / img.channels as f32;
            hist[((g * 16.0) as usize).min(15)] += 1.0 / n;
        }
        hist[16] = 1.0;
        hist
    };
    let xs: Vec<Vec<f64>> = train.images.iter().map(feature).collect();
    let dim = 16;
    let mean: Vec<f64> = (0..dim).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / xs.len() as f64).collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / xs.len() as f64).sqrt().max(1e-9))
        .collect();
    let standardize = |mut x: Vec<f64>| {
        for j in 0..dim {
            x[j] = (x[j] - mean[j]) / std[j];
        }
        x
    };
    let xs: Vec<Vec<f64>> = xs.into_iter().map(standardize).collect();
    let k = train.n_classes();
    let mut w = vec![vec![0.0; dim + 1]; k];
    let softmax = |w: &[Vec<f64>], x: &[f64]| {
        let s: Vec<f64> = w.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<f64>>()
    };
    for _ in 0..2000 {
        let mut g = vec![vec![0.0; dim + 1]; k];
        for (x, &c) in xs.iter().zip(&train.labels) {
            let p = softmax(&w, x);
            for (j, gj) in g.iter_mut().enumerate() {
                let d = p[j] - f64::from(u8::from(j == c));
                for (gi, xi) in gj.iter_mut().zip(x) {
                    *gi += d * xi / xs.len() as f64;
                }
            }
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            for (a, b) in wj.iter_mut().zip(gj) {
                *a -= 0.5 * (b + 1e-3 * *a);
            }
        }
    }
    let correct = test
        .images
        .iter()
        .zip(&test.labels)
        .filter(|(img, &c)| {
            let p = softmax(&w, &standardize(feature(img)));
            head::argmax_class(Array1::from(p).view()) == c
        })
        .count();
    correct as f64 / test.len() as f64
}

const GENERALIZATION_SEED: u64 = 505;

fn generalization_corpus() -> (ImageSet, ImageSet) {
    let classes = corpus(100, GENERALIZATION_SEED);
    (take(&classes, 0, 80), take(&classes, 80, 100))
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let (train_set, test_set) = generalization_corpus();
    let cfg = desk_config(0, 4000, Variant::Full);
    let acc = held_out(&train_set, &test_set, &cfg);
    let baseline = histogram_baseline(&train_set, &test_set);
    let (fast, time) = within_budget(start, 45.0 * 60.0);
    verdict(
        acc >= 0.90 && fast,
        format!("held-out accuracy {acc:.3} on {} images; histogram baseline {baseline:.3}; {time}", test_set.len()),
    )
}

/// Per-run iteration count for the ablation sweep (15 runs).
const ABLATION_ITERATIONS: usize = 1000;

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let (train_set, test_set) = generalization_corpus();
    let mut by_variant = Vec::new();
    for variant in [Variant::Full, Variant::Variant1, Variant::Variant2] {
        let accs: Vec<f64> = (0..5).map(|seed| held_out(&train_set, &test_set, &desk_config(seed, ABLATION_ITERATIONS, variant))).collect();
        by_variant.push((variant, accs));
    }
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    let medians: Vec<f64> = by_variant.iter().map(|(_, a)| median(a)).collect();
    let detail = by_variant
        .iter()
        .zip(&medians)
        .map(|((v, a), m)| format!("{v} median {m:.3} [{}]", fmt(a)))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        medians[0] >= medians[1],
        format!("{detail}; {ABLATION_ITERATIONS} iterations per run; {:.0} s", start.elapsed().as_secs_f64()),
    )
}

fn checkpoint_for(out: &sidn_core::train::TrainOutcome, set: &ImageSet, cfg: &TrainConfig) -> Checkpoint {
    Checkpoint {
        params: out.params.clone(),
        adam: Some(out.adam.clone()),
        meta: CheckpointMeta {
            class_table: set.class_table.clone(),
            arch: out.params.arch.clone(),
            train_config: Some(cfg.clone()),
            pixel_mean: out.pixel_mean.clone(),
            iteration: out.log.len(),
            adam_step: Some(out.adam.step),
        },
    }
}

fn metrics_log(records: &[MetricsRecord]) -> Vec<u8> {
    records
        .iter()
        .flat_map(|r| {
            let mut line = serde_json::to_vec(r).unwrap();
            line.push(b'\n');
            line
        })
        .collect()
}

fn criterion_7() -> Verdict {
    let set = take(&corpus(8, 707), 0, 8);
    let cfg = TrainConfig {
        batch_size: 8,
        augment: true,
        ..desk_config(42, 40, Variant::Full)
    };
    let runs: Vec<(u32, u32)> = (0..2)
        .map(|_| {
            let out = run_training(&set, &cfg);
            let bytes = checkpoint_for(&out, &set, &cfg).to_bytes().unwrap();
            (crc32fast::hash(&metrics_log(&out.log)), crc32fast::hash(&bytes))
        })
        .collect();
    verdict(
        runs[0] == runs[1],
        format!("metrics crc {:08x}/{:08x}; checkpoint crc {:08x}/{:08x}", runs[0].0, runs[1].0, runs[0].1, runs[1].1),
    )
}

fn criterion_8() -> Verdict {
    let set = take(&corpus(6, 808), 0, 6);
    let cfg = TrainConfig {
        batch_size: 6,
        ..desk_config(8, 25, Variant::Full)
    };
    let out = run_training(&set, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.sidn"), dir.path().join("b.sidn"));
    let original = checkpoint_for(&out, &set, &cfg);
    original.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    let identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let eval = |c: &Checkpoint| -> EvalReport { evaluate(&c.params, &set, &c.meta.pixel_mean, cfg.max_patches, 3).unwrap() };
    let (e0, e1) = (eval(&original), eval(&loaded));
    verdict(
        identical && e0 == e1 && loaded == original,
        format!("files identical: {identical}; eval accuracy {:.3}/{:.3}, nll {:.6}/{:.6}", e0.accuracy, e1.accuracy, e0.nll, e1.nll),
    )
}

fn criterion_9() -> Verdict {
    let set = take(&corpus(12, 909), 0, 12);
    let target = (set.n_classes() as f64).ln();
    let mut losses = Vec::new();
    for seed in 0..3 {
        let cfg = TrainConfig {
            seed,
            max_iterations: 1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        losses.push(run_training(&set, &cfg).log[0].loss);
    }
    let ok = losses.iter().all(|l| (l - target).abs() <= 0.2);
    verdict(
        ok,
        format!(
            "first-batch losses [{}] vs ln 3 = {target:.4}",
            losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion_10() -> Verdict {
    let count = |w: usize| -> PatchSequence {
        let img = resize_to_height(&RawImage::new(40, w, 3, vec![0; 40 * w * 3]).unwrap(), 40).unwrap();
        extract_patches(&img, "w").unwrap()
    };
    let got: Vec<usize> = [32, 40, 96, 320].iter().map(|&w| count(w).len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let capped: Vec<usize> = [320, 440, 1000, 4000]
        .iter()
        .map(|&w| cap_patches(count(w), DEFAULT_MAX_PATCHES, &mut rng).unwrap().len())
        .collect();
    let ok = got == [2, 4, 18, 74] && capped.iter().all(|&d| d <= DEFAULT_MAX_PATCHES) && capped[0] == 74;
    verdict(ok, format!("D = {got:?}; capped {capped:?} at {DEFAULT_MAX_PATCHES}"))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("shape conformance", criterion_1),
        ("gradient check", criterion_2),
        ("normalization invariants", criterion_3),
        ("overfit 30 images", criterion_4),
        ("generalization 240/60", criterion_5),
        ("ablation direction", criterion_6),
        ("determinism", criterion_7),
        ("checkpoint round trip", criterion_8),
        ("initial loss", criterion_9),
        ("patch-count law", criterion_10),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let v = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failures += usize::from(!v.passed);
        println!("criterion {id:>2} {} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
