//! Training-time augmentation: scale jitter, padded random crop, horizontal
//! flip, photometric jitter (image only), and per-channel normalization.
//! Masks receive only the geometric transforms, resampled nearest-neighbour.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util;

use super::ImageSample;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentConfig {
    /// Output side length; short sides are padded with background.
    pub crop: usize,
    /// Uniform random rescale range applied before cropping.
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    /// Multiplicative brightness jitter half-width (0 disables).
    pub brightness: f64,
    /// Contrast jitter half-width around 1 (0 disables).
    pub contrast: f64,
    /// Per-channel multiplicative jitter half-width (0 disables).
    pub channel_jitter: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl AugmentConfig {
    /// Standard training pipeline at the given crop size.
    pub fn training(crop: usize) -> Self {
        Self {
            crop,
            scale_range: (0.5, 2.0),
            hflip_prob: 0.5,
            brightness: 0.125,
            contrast: 0.1,
            channel_jitter: 0.05,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// No-op pipeline: scale 1, no flip/jitter, unit normalization.
    pub fn identity(crop: usize) -> Self {
        Self {
            crop,
            scale_range: (1.0, 1.0),
            hflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            channel_jitter: 0.0,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Overfitting pipeline: geometric identity but real normalization.
    pub fn deterministic(crop: usize) -> Self {
        Self {
            crop,
            scale_range: (1.0, 1.0),
            hflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            channel_jitter: 0.0,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

pub fn normalize_image(image: &Array3<f64>, mean: &[f64; 3], std: &[f64; 3]) -> Array3<f64> {
    let mut out = image.clone();
    for ((_, _, c), v) in out.indexed_iter_mut() {
        *v = (*v - mean[c]) / std[c];
    }
    out
}

fn pad_to(image: &Array3<f64>, mask: &Array2<u8>, min_h: usize, min_w: usize) -> (Array3<f64>, Array2<u8>) {
    let (h, w, _) = image.dim();
    if h >= min_h && w >= min_w {
        return (image.clone(), mask.clone());
    }
    let (nh, nw) = (h.max(min_h), w.max(min_w));
    let mut img = Array3::<f64>::zeros((nh, nw, 3));
    let mut msk = Array2::<u8>::zeros((nh, nw)); // background id 0
    img.slice_mut(ndarray::s![..h, ..w, ..]).assign(image);
    msk.slice_mut(ndarray::s![..h, ..w]).assign(mask);
    (img, msk)
}

/// One augmented training sample. Deterministic for a fixed rng stream.
pub fn augment(sample: &ImageSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> ImageSample {
    let (h, w, _) = sample.image.dim();
    // 1. Random rescale.
    let scale = if cfg.scale_range.0 == cfg.scale_range.1 {
        cfg.scale_range.0
    } else {
        rng.gen_range(cfg.scale_range.0..cfg.scale_range.1)
    };
    let (sh, sw) = (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    );
    let mut image = util::resize_bilinear_hwc(&sample.image, sh, sw);
    let mut mask = util::resize_nearest_mask(&sample.mask, sh, sw);
    // 2. Pad if short, then random crop.
    let (img_p, mask_p) = pad_to(&image, &mask, cfg.crop, cfg.crop);
    let (ph, pw, _) = img_p.dim();
    let oy = if ph > cfg.crop { rng.gen_range(0..=ph - cfg.crop) } else { 0 };
    let ox = if pw > cfg.crop { rng.gen_range(0..=pw - cfg.crop) } else { 0 };
    image = img_p
        .slice(ndarray::s![oy..oy + cfg.crop, ox..ox + cfg.crop, ..])
        .to_owned();
    mask = mask_p
        .slice(ndarray::s![oy..oy + cfg.crop, ox..ox + cfg.crop])
        .to_owned();
    // 3. Horizontal flip.
    if cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob) {
        image = image.slice(ndarray::s![.., ..;-1, ..]).to_owned();
        mask = mask.slice(ndarray::s![.., ..;-1]).to_owned();
    }
    // 4. Photometric jitter, image only, clamped to [0,1].
    if cfg.brightness > 0.0 || cfg.contrast > 0.0 || cfg.channel_jitter > 0.0 {
        let b = if cfg.brightness > 0.0 {
            rng.gen_range(1.0 - cfg.brightness..1.0 + cfg.brightness)
        } else {
            1.0
        };
        let c = if cfg.contrast > 0.0 {
            rng.gen_range(1.0 - cfg.contrast..1.0 + cfg.contrast)
        } else {
            1.0
        };
        let mut ch = [1.0f64; 3];
        if cfg.channel_jitter > 0.0 {
            for j in &mut ch {
                *j = rng.gen_range(1.0 - cfg.channel_jitter..1.0 + cfg.channel_jitter);
            }
        }
        for ((_, _, k), v) in image.indexed_iter_mut() {
            let centered = (*v - 0.5) * c + 0.5;
            *v = (centered * b * ch[k]).clamp(0.0, 1.0);
        }
    }
    // 5. Per-channel normalization.
    let image = normalize_image(&image, &cfg.mean, &cfg.std);
    ImageSample {
        id: sample.id.clone(),
        image,
        mask,
    }
}
