//! Attention heat maps: white where the network looked hardest.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::preprocess::{NormalizedImage, PATCH_SIZE};
use crate::train::{predict, Prediction};

/// 8-bit grayscale map at the normalized image's size, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl AttentionMap {
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Writes PGM for `.pgm`/`.pnm` paths and PNG otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let pgm = matches!(
            path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("pgm" | "pnm")
        );
        let (w, h) = (self.width as u32, self.height as u32);
        if pgm {
            let out = BufWriter::new(File::create(path)?);
            PnmEncoder::new(out)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(&self.pixels, w, h, ExtendedColorType::L8)?;
        } else {
            image::save_buffer_with_format(path, &self.pixels, w, h, ExtendedColorType::L8, ImageFormat::Png)?;
        }
        Ok(())
    }
}

/// Each pixel takes the largest `p_d / max(p)` among the patches covering it,
/// scaled to `0..=255`. Pixels no patch covers stay black.
pub fn attention_map(height: usize, width: usize, origins: &[(usize, usize)], weights: &[f32]) -> Result<AttentionMap> {
    if origins.len() != weights.len() {
        return Err(Error::InvalidShape(format!(
            "{} patch origins for {} attention weights",
            origins.len(),
            weights.len()
        )));
    }
    let peak = weights.iter().copied().fold(0f32, f32::max);
    if !(peak > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput("attention weights must be finite, non-negative and not all zero".into()));
    }
    let mut level = vec![0f32; height * width];
    for (&(x0, y0), &w) in origins.iter().zip(weights) {
        if x0 + PATCH_SIZE > width || y0 + PATCH_SIZE > height {
            return Err(Error::InvalidInput(format!(
                "patch at ({x0}, {y0}) falls outside a {height}x{width} image"
            )));
        }
        let v = w / peak;
        for y in y0..y0 + PATCH_SIZE {
            for cell in &mut level[y * width + x0..y * width + x0 + PATCH_SIZE] {
                *cell = cell.max(v);
            }
        }
    }
    Ok(AttentionMap {
        height,
        width,
        pixels: level.into_iter().map(|v| (v * 255.0).round() as u8).collect(),
    })
}

/// Classifies `img` and writes its attention map to `out`.
pub fn render_attention_map(
    params: &ModelParams<f32>,
    img: &NormalizedImage,
    pixel_mean: &[f32],
    max_patches: usize,
    seed: u64,
    out: impl AsRef<Path>,
) -> Result<(Prediction, AttentionMap)> {
    let pred = predict(params, img, pixel_mean, max_patches, seed)?;
    let map = attention_map(pred.height, pred.width, &pred.origins, &pred.attention)?;
    map.save(out)?;
    Ok((pred, map))
}
