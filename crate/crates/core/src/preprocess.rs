//! Text-line image normalization and dense patch extraction.
//!
//! A text-line image is resized to a fixed height (aspect ratio kept), then a
//! 32×32 window slides over it with stride 8, emitting the top and bottom
//! patch of every column before moving right.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const TARGET_HEIGHT: usize = 40;
pub const PATCH_SIZE: usize = 32;
pub const PATCH_STRIDE: usize = 8;
pub const DEFAULT_MAX_PATCHES: usize = 100;

/// 8-bit image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "image buffer holds {} samples, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Decodes a PNG or PPM/PGM file, converting to `channels` (1 or 3).
    pub fn load(path: impl AsRef<Path>, channels: usize) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_dynamic(img, channels)
    }

    pub fn from_dynamic(img: image::DynamicImage, channels: usize) -> Result<Self> {
        match channels {
            1 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Self::new(h as usize, w as usize, 1, g.into_raw())
            }
            3 => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::new(h as usize, w as usize, 3, rgb.into_raw())
            }
            c => Err(Error::Config(format!("unsupported channel count {c}"))),
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Height-normalized image with samples scaled to `[0, 1]`, row-major,
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl NormalizedImage {
    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Width `raw_width` maps to after resizing to `target_height`, before
    /// any padding to the patch size.
    pub fn scaled_width(raw_height: usize, raw_width: usize, target_height: usize) -> usize {
        let w = (raw_width as f64 * target_height as f64 / raw_height as f64).round() as usize;
        w.max(1)
    }
}

/// One 32×32 crop, stored channel-major (`C×32×32`).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Vec<f32>,
    pub origin_x: usize,
    pub origin_y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Vec<Patch>,
    pub channels: usize,
    pub sample_id: String,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Bilinear resize to `target_height` keeping the aspect ratio. Samples are
/// scaled to `[0, 1]`; results narrower than one patch are right-padded by
/// replicating the last column.
pub fn resize_to_height(img: &RawImage, target_height: usize) -> Result<NormalizedImage> {
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidInput("zero-dimension image".into()));
    }
    if target_height < PATCH_SIZE {
        return Err(Error::InvalidInput(format!(
            "target height {target_height} is smaller than the patch size {PATCH_SIZE}"
        )));
    }
    let channels = img.channels;
    let out_h = target_height;
    let scaled_w = NormalizedImage::scaled_width(img.height, img.width, target_height);
    let out_w = scaled_w.max(PATCH_SIZE);
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / scaled_w as f64;

    let taps = |dst: usize, scale: f64, len: usize| -> (usize, usize, f32) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, (src - lo as f64) as f32)
    };
    let col_taps: Vec<_> = (0..scaled_w).map(|x| taps(x, sx, img.width)).collect();

    let mut data = vec![0f32; out_h * out_w * channels];
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, sy, img.height);
        for (x, &(x0, x1, fx)) in col_taps.iter().enumerate() {
            for c in 0..channels {
                let p00 = img.get(y0, x0, c) as f32;
                let p01 = img.get(y0, x1, c) as f32;
                let p10 = img.get(y1, x0, c) as f32;
                let p11 = img.get(y1, x1, c) as f32;
                let top = p00 + (p01 - p00) * fx;
                let bottom = p10 + (p11 - p10) * fx;
                data[(y * out_w + x) * channels + c] = (top + (bottom - top) * fy) / 255.0;
            }
        }
        for x in scaled_w..out_w {
            for c in 0..channels {
                data[(y * out_w + x) * channels + c] = data[(y * out_w + scaled_w - 1) * channels + c];
            }
        }
    }
    Ok(NormalizedImage {
        height: out_h,
        width: out_w,
        channels,
        data,
    })
}

/// Number of patches `extract_patches` emits for an image of the given
/// normalized size.
pub fn patch_count(height: usize, width: usize) -> usize {
    if height < PATCH_SIZE || width < PATCH_SIZE {
        return 0;
    }
    ((height - PATCH_SIZE) / PATCH_STRIDE + 1) * ((width - PATCH_SIZE) / PATCH_STRIDE + 1)
}

/// Slides the patch window left to right; within each column the patches are
/// emitted top to bottom.
pub fn extract_patches(img: &NormalizedImage, sample_id: impl Into<String>) -> Result<PatchSequence> {
    if img.height < PATCH_SIZE || img.width < PATCH_SIZE {
        return Err(Error::InvalidInput(format!(
            "normalized image {}x{} is smaller than a patch",
            img.height, img.width
        )));
    }
    let c = img.channels;
    let mut patches = Vec::with_capacity(patch_count(img.height, img.width));
    for x0 in (0..=img.width - PATCH_SIZE).step_by(PATCH_STRIDE) {
        for y0 in (0..=img.height - PATCH_SIZE).step_by(PATCH_STRIDE) {
            let mut pixels = vec![0f32; c * PATCH_SIZE * PATCH_SIZE];
            for ch in 0..c {
                let plane = &mut pixels[ch * PATCH_SIZE * PATCH_SIZE..(ch + 1) * PATCH_SIZE * PATCH_SIZE];
                for dy in 0..PATCH_SIZE {
                    for dx in 0..PATCH_SIZE {
                        plane[dy * PATCH_SIZE + dx] = img.get(y0 + dy, x0 + dx, ch);
                    }
                }
            }
            patches.push(Patch {
                pixels,
                origin_x: x0,
                origin_y: y0,
            });
        }
    }
    Ok(PatchSequence {
        patches,
        channels: c,
        sample_id: sample_id.into(),
    })
}

/// Keeps at most `n_max` patches, sampled uniformly without replacement and
/// returned in their original spatial order.
pub fn cap_patches<R: Rng + ?Sized>(seq: PatchSequence, n_max: usize, rng: &mut R) -> Result<PatchSequence> {
    if n_max == 0 {
        return Err(Error::Config("patch cap must be at least 1".into()));
    }
    if seq.len() <= n_max {
        return Ok(seq);
    }
    let mut keep = rand::seq::index::sample(rng, seq.len(), n_max).into_vec();
    keep.sort_unstable();
    let PatchSequence {
        patches,
        channels,
        sample_id,
    } = seq;
    let mut slots: Vec<Option<Patch>> = patches.into_iter().map(Some).collect();
    let patches = keep.into_iter().map(|i| slots[i].take().expect("distinct indices")).collect();
    Ok(PatchSequence {
        patches,
        channels,
        sample_id,
    })
}

/// Loads, normalizes and patches one image file.
pub fn image_to_patches(path: impl AsRef<Path>, channels: usize) -> Result<(NormalizedImage, PatchSequence)> {
    let path = path.as_ref();
    let raw = RawImage::load(path, channels)?;
    let norm = resize_to_height(&raw, TARGET_HEIGHT)?;
    let seq = extract_patches(&norm, path.display().to_string())?;
    Ok((norm, seq))
}
