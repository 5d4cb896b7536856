//! Deterministic synthetic text-line corpora. Each class is a pseudo-script
//! defined by stroke statistics (pen width, curvature, glyph shape and
//! spacing, baseline waviness, connecting strokes, head bars, dots), rendered
//! dark-on-light with noise, tint and contrast jitter.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{DatasetManifest, Record};
use crate::error::{Error, Result};
use crate::preprocess::RawImage;

#[derive(Debug, Clone, PartialEq)]
pub struct StrokeStyle {
    pub name: String,
    /// Pen diameter in pixels at a 40-pixel line height.
    pub stroke_width: f64,
    /// Probability that a stroke is an arc rather than a segment.
    pub curvature: f64,
    /// Glyph width and inter-glyph gap, in x-heights.
    pub glyph_width: f64,
    pub spacing: f64,
    pub strokes_per_glyph: usize,
    /// Allow diagonal segments (otherwise axis-aligned).
    pub diagonals: bool,
    /// Baseline wave amplitude, in x-heights.
    pub waviness: f64,
    /// Connect glyphs along the baseline.
    pub ligature: bool,
    /// Draw a bar along the top of each word.
    pub head_bar: bool,
    /// Probability of a dot above or below a glyph.
    pub dots: f64,
}

impl StrokeStyle {
    /// The three default classes.
    pub fn defaults() -> Vec<StrokeStyle> {
        vec![
            StrokeStyle {
                name: "blocky".into(),
                stroke_width: 4.2,
                curvature: 0.0,
                glyph_width: 0.8,
                spacing: 0.35,
                strokes_per_glyph: 3,
                diagonals: false,
                waviness: 0.0,
                ligature: false,
                head_bar: false,
                dots: 0.0,
            },
            StrokeStyle {
                name: "cursive".into(),
                stroke_width: 1.3,
                curvature: 0.85,
                glyph_width: 1.0,
                spacing: 0.05,
                strokes_per_glyph: 2,
                diagonals: true,
                waviness: 0.12,
                ligature: true,
                head_bar: false,
                dots: 0.3,
            },
            StrokeStyle {
                name: "angular".into(),
                stroke_width: 2.5,
                curvature: 0.15,
                glyph_width: 0.6,
                spacing: 0.7,
                strokes_per_glyph: 2,
                diagonals: true,
                waviness: 0.0,
                ligature: false,
                head_bar: true,
                dots: 0.0,
            },
        ]
    }

    /// A reproducible style for class index `k`; the first three are
    /// [`defaults`](Self::defaults).
    pub fn for_class(k: usize) -> StrokeStyle {
        if let Some(s) = Self::defaults().into_iter().nth(k) {
            return s;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x005c_4197_u64 + k as u64);
        StrokeStyle {
            name: format!("script{k}"),
            stroke_width: rng.random_range(1.2..3.6),
            curvature: rng.random_range(0.0..1.0),
            glyph_width: rng.random_range(0.5..1.1),
            spacing: rng.random_range(0.0..0.6),
            strokes_per_glyph: rng.random_range(1..=3),
            diagonals: rng.random_bool(0.5),
            waviness: rng.random_range(0.0..0.15),
            ligature: rng.random_bool(0.4),
            head_bar: rng.random_bool(0.3),
            dots: rng.random_range(0.0..0.4),
        }
    }

    fn same_statistics(&self, other: &StrokeStyle) -> bool {
        let mut a = self.clone();
        a.name.clone_from(&other.name);
        a == *other
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub samples_per_class: usize,
    /// Inclusive pixel ranges before height normalization.
    pub width_range: (usize, usize),
    pub height_range: (usize, usize),
    /// Standard deviation of the additive pixel noise, on a 0..1 scale.
    pub noise: f64,
    pub seed: u64,
    pub styles: Vec<StrokeStyle>,
}

impl SynthSpec {
    pub fn new(n_classes: usize, samples_per_class: usize, seed: u64) -> Self {
        Self {
            samples_per_class,
            width_range: (60, 300),
            height_range: (30, 60),
            noise: 0.05,
            seed,
            styles: (0..n_classes).map(StrokeStyle::for_class).collect(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.styles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles.len() < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples per class must be positive".into()));
        }
        let (w0, w1) = self.width_range;
        let (h0, h1) = self.height_range;
        if w0 < 8 || w0 > w1 || h0 < 8 || h0 > h1 {
            return Err(Error::Config(format!(
                "bad synthetic size ranges: width {w0}..={w1}, height {h0}..={h1}"
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        for (i, a) in self.styles.iter().enumerate() {
            for b in &self.styles[i + 1..] {
                if a.name == b.name || a.same_statistics(b) {
                    return Err(Error::Config(format!("classes `{}` and `{}` are not distinct", a.name, b.name)));
                }
            }
        }
        Ok(())
    }
}

struct Canvas {
    h: usize,
    w: usize,
    /// Ink coverage in [0, 1].
    ink: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            ink: vec![0.0; h * w],
        }
    }

    /// Round pen with a one-pixel antialiased rim.
    fn stamp(&mut self, cx: f64, cy: f64, radius: f64) {
        let reach = radius + 1.0;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as isize).min(self.w as isize - 1);
        let y1 = ((cy + reach).ceil() as isize).min(self.h as isize - 1);
        if x1 < 0 || y1 < 0 {
            return;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
                let v = &mut self.ink[y * self.w + x];
                *v = v.max(cover);
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], radius: f64) {
        for pair in pts.windows(2) {
            let ((ax, ay), (bx, by)) = (pair[0], pair[1]);
            let steps = ((bx - ax).hypot(by - ay) * 2.0).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                self.stamp(ax + t * (bx - ax), ay + t * (by - ay), radius);
            }
        }
    }
}

/// Draws one glyph with its box's left edge at `x` and returns the glyph
/// width in pixels.
fn draw_glyph(
    canvas: &mut Canvas,
    style: &StrokeStyle,
    x: f64,
    baseline: &dyn Fn(f64) -> f64,
    xh: f64,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let gw = style.glyph_width * xh * rng.random_range(0.8..1.2);
    for _ in 0..style.strokes_per_glyph {
        let mut pts = Vec::new();
        if rng.random_bool(style.curvature) {
            let cx = x + gw * rng.random_range(0.3..0.7);
            let r = 0.5 * xh * rng.random_range(0.5..1.0);
            let cy = baseline(cx) - r;
            let start = rng.random_range(0.0..2.0 * PI);
            let sweep = rng.random_range(0.8..1.8) * PI;
            for s in 0..=24 {
                let a = start + sweep * s as f64 / 24.0;
                pts.push((cx + r * a.cos() * gw / xh, cy + r * a.sin()));
            }
        } else {
            let tall = if rng.random_bool(0.2) { 1.6 } else { 1.0 };
            let grid = |rng: &mut ChaCha8Rng| {
                let gx = x + gw * (rng.random_range(0..3) as f64 / 2.0);
                let gy = -xh * tall * (rng.random_range(0..3) as f64 / 2.0);
                (gx, gy)
            };
            let (ax, ay) = grid(rng);
            let (mut bx, mut by) = grid(rng);
            if !style.diagonals {
                if rng.random_bool(0.5) {
                    bx = ax;
                } else {
                    by = ay;
                }
            }
            if (ax, ay) == (bx, by) {
                by = if ay == 0.0 { -xh * tall } else { 0.0 };
            }
            pts.push((ax, baseline(ax) + ay));
            pts.push((bx, baseline(bx) + by));
        }
        canvas.polyline(&pts, radius);
    }
    if style.dots > 0.0 && rng.random_bool(style.dots) {
        let dx = x + gw * 0.5;
        let dy = if rng.random_bool(0.5) { baseline(dx) - 1.5 * xh } else { baseline(dx) + 0.5 * xh };
        canvas.stamp(dx, dy, radius * 1.4);
    }
    gw
}

/// Renders sample `index` of class `class`. Pure in `(spec, class, index)`.
pub fn render_sample(spec: &SynthSpec, class: usize, index: usize) -> Result<RawImage> {
    let style = spec
        .styles
        .get(class)
        .ok_or_else(|| Error::InvalidInput(format!("class {class} out of range")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((class * spec.samples_per_class + index) as u64);

    let h = rng.random_range(spec.height_range.0..=spec.height_range.1);
    let w = rng.random_range(spec.width_range.0..=spec.width_range.1);
    let scale = h as f64 / 40.0;
    let xh = h as f64 * rng.random_range(0.34..0.4);
    let base_y = h as f64 * rng.random_range(0.62..0.74);
    let radius = 0.5 * style.stroke_width * scale * rng.random_range(0.92..1.08);
    let wave_amp = style.waviness * xh;
    let wave_period = rng.random_range(2.0..4.0) * xh;
    let wave_phase = rng.random_range(0.0..2.0 * PI);
    let baseline = move |x: f64| base_y + wave_amp * (2.0 * PI * x / wave_period + wave_phase).sin();

    let mut canvas = Canvas::new(h, w);
    let margin = rng.random_range(1.0..0.3 * xh + 2.0);
    let mut x = margin;
    while x < w as f64 - margin - style.glyph_width * xh * 0.5 {
        let word_start = x;
        let glyphs = rng.random_range(2..=6);
        for g in 0..glyphs {
            let gw = draw_glyph(&mut canvas, style, x, &baseline, xh, radius, &mut rng);
            let next = x + gw + style.spacing * xh;
            if style.ligature && g + 1 < glyphs {
                let pts: Vec<_> = (0..=8).map(|s| {
                    let px = x + gw + (next - x - gw) * s as f64 / 8.0;
                    (px, baseline(px))
                }).collect();
                canvas.polyline(&pts, radius);
            }
            x = next;
            if x >= w as f64 - margin {
                break;
            }
        }
        if style.head_bar {
            let top = |px: f64| baseline(px) - xh;
            canvas.polyline(&[(word_start, top(word_start)), (x - style.spacing * xh, top(x))], radius);
        }
        x += xh * rng.random_range(0.7..1.2);
    }

    let bg: [f64; 3] = std::array::from_fn(|_| 0.0);
    let bg_level = rng.random_range(0.78..0.9);
    let ink_level = rng.random_range(0.1..0.25);
    let tint_bg = bg.map(|_| rng.random_range(0.92..1.08));
    let tint_ink = bg.map(|_| rng.random_range(0.8..1.2));
    let gradient = rng.random_range(-0.1..0.1);
    // uniform noise with the requested standard deviation
    let half = spec.noise * 3f64.sqrt();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for xpix in 0..w {
            let cover = canvas.ink[y * w + xpix];
            let shade = gradient * (xpix as f64 / w as f64 - 0.5);
            let n = if half > 0.0 { rng.random_range(-half..half) } else { 0.0 };
            for c in 0..3 {
                let b = bg_level * tint_bg[c] + shade;
                let i = ink_level * tint_ink[c];
                let v = b * (1.0 - cover) + i * cover + n;
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RawImage::new(h, w, 3, data)
}

fn to_png(img: &RawImage, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::InvalidInput("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Renders the corpus under `out_dir/images` and writes
/// `out_dir/manifest.tsv`. Output bytes depend only on `spec`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::Load {
        path: images.clone(),
        reason: format!("cannot create output directory: {e}"),
    })?;
    let jobs: Vec<(usize, usize)> = (0..spec.n_classes())
        .flat_map(|c| (0..spec.samples_per_class).map(move |i| (c, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(c, i)| -> Result<Record> {
            let rel = PathBuf::from("images").join(format!("{}_{i:04}.png", spec.styles[c].name));
            to_png(&render_sample(spec, c, i)?, &out_dir.join(&rel))?;
            Ok(Record { path: rel, label: c })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
        class_table: spec.styles.iter().map(|s| s.name.clone()).collect(),
    };
    manifest.save(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
