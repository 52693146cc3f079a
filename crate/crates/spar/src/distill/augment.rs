//! Training-time image augmentation: random short-side resize, axis
//! independent cropping, horizontal flipping, and rounding down to
//! patch-divisible dimensions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::tensor::{bilinear_resize, FeatureGrid};
use crate::Result;

/// Augmentation stream keyed by `(seed, image_index)`, so teacher
/// precomputation and student training regenerate identical geometry
/// without storing augmented images.
pub fn augment_rng(seed: u64, image_index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&image_index.to_le_bytes());
    key[16..24].copy_from_slice(b"AUGMENT1");
    ChaCha8Rng::from_seed(key)
}

/// Mirrors the grid left-right. Applying it twice is the identity.
pub fn hflip(src: &FeatureGrid) -> FeatureGrid {
    let (h, w, ch) = src.shape();
    FeatureGrid::from_fn(h, w, ch, |r, c, k| src.get(r, w - 1 - c, k))
}

fn crop(src: &FeatureGrid, r0: usize, c0: usize, h: usize, w: usize) -> FeatureGrid {
    let ch = src.channels();
    FeatureGrid::from_fn(h, w, ch, |r, c, k| src.get(r0 + r, c0 + c, k))
}

fn floor_to_multiple(v: usize, p: usize) -> usize {
    ((v / p) * p).max(p)
}

/// One augmentation draw. RNG consumption order: short side, crop coin,
/// crop sides (h then w), crop origin (row then col), flip coin.
pub fn augment(
    image: &FeatureGrid,
    rng: &mut impl Rng,
    cfg: &TrainConfig,
    patch: usize,
) -> Result<FeatureGrid> {
    let (h, w, _) = image.shape();

    // 1. resize so the shorter side hits a uniform draw, keeping aspect
    let target_short = rng.random_range(cfg.resize_short_min..=cfg.resize_short_max);
    let short = h.min(w) as f64;
    let scale = target_short as f64 / short;
    let new_h = ((h as f64 * scale).round() as usize).max(1);
    let new_w = ((w as f64 * scale).round() as usize).max(1);
    let mut out = bilinear_resize(image, new_h, new_w)?;

    // 2. axis-independent crop
    if rng.random_bool(cfg.crop_prob) {
        let (cur_h, cur_w, _) = out.shape();
        let side_h = if cur_h <= cfg.crop_min {
            cur_h
        } else {
            rng.random_range(cfg.crop_min..=cur_h)
        };
        let side_w = if cur_w <= cfg.crop_min {
            cur_w
        } else {
            rng.random_range(cfg.crop_min..=cur_w)
        };
        let r0 = rng.random_range(0..=cur_h - side_h);
        let c0 = rng.random_range(0..=cur_w - side_w);
        out = crop(&out, r0, c0, side_h, side_w);
    }

    // 3. horizontal flip
    if rng.random_bool(cfg.flip_prob) {
        out = hflip(&out);
    }

    // 4. round each side down to a patch multiple
    let (cur_h, cur_w, _) = out.shape();
    let final_h = floor_to_multiple(cur_h, patch);
    let final_w = floor_to_multiple(cur_w, patch);
    if (final_h, final_w) != (cur_h, cur_w) {
        out = bilinear_resize(&out, final_h, final_w)?;
    }
    Ok(out)
}

/// Scales the image up so both sides reach the window size, keeping
/// patch divisibility. Images already large enough pass through.
pub fn ensure_min_side(image: &FeatureGrid, window: usize, patch: usize) -> Result<FeatureGrid> {
    let (h, w, _) = image.shape();
    if h >= window && w >= window {
        return Ok(image.clone());
    }
    let scale = window as f64 / h.min(w) as f64;
    let new_h = floor_to_multiple((h as f64 * scale).round() as usize, patch).max(window);
    let new_w = floor_to_multiple((w as f64 * scale).round() as usize, patch).max(window);
    bilinear_resize(image, new_h, new_w)
}
