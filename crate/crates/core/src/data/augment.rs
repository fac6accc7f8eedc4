use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use super::scene::SceneAnnotation;
use crate::error::{FanError, Result};
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_min: f64,
    pub crop_max: f64,
    pub flip_prob: f64,
    /// Additive brightness offset drawn from `[-b, b]`.
    pub brightness: f32,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f32,
    pub target_train_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { crop_min: 0.3, crop_max: 1.0, flip_prob: 0.5, brightness: 0.1, contrast: 0.2, target_train_size: 256 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(FanError::Config(format!(
                "crop range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.crop_min, self.crop_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(FanError::Config("flip_prob must be in [0, 1]".into()));
        }
        if !(self.brightness >= 0.0 && (0.0..1.0).contains(&self.contrast)) {
            return Err(FanError::Config("jitter ranges must satisfy brightness >= 0, 0 <= contrast < 1".into()));
        }
        if self.target_train_size == 0 {
            return Err(FanError::Config("target_train_size must be positive".into()));
        }
        Ok(())
    }
}

/// A square crop window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x: f64,
    pub y: f64,
    pub side: f64,
}

impl CropWindow {
    pub fn contains_center(&self, b: &BBox) -> bool {
        let (cx, cy) = b.center();
        cx >= self.x && cx < self.x + self.side && cy >= self.y && cy < self.y + self.side
    }
}

/// Side uniform in `[crop_min, crop_max]·short_edge`, position uniform.
pub fn sample_crop<R: Rng + ?Sized>(width: usize, height: usize, cfg: &AugmentConfig, rng: &mut R) -> CropWindow {
    let short = width.min(height) as f64;
    let ratio = if cfg.crop_max > cfg.crop_min { rng.random_range(cfg.crop_min..=cfg.crop_max) } else { cfg.crop_min };
    let side = ratio * short;
    let x = if width as f64 > side { rng.random_range(0.0..=width as f64 - side) } else { 0.0 };
    let y = if height as f64 > side { rng.random_range(0.0..=height as f64 - side) } else { 0.0 };
    CropWindow { x, y, side }
}

/// Keeps boxes whose centres lie in the window, clipped and rebased, then
/// scales the patch to `target × target`.
pub fn apply_crop(image: &RgbImage, ann: &SceneAnnotation, win: CropWindow, target: usize) -> (RgbImage, SceneAnnotation) {
    let region = BBox::new(win.x, win.y, win.x + win.side, win.y + win.side).expect("positive crop side");
    let f = target as f64 / win.side;
    let mut out = SceneAnnotation { boxes: Vec::new(), occlusion: Vec::new(), ..ann.clone() };
    for (b, &o) in ann.boxes.iter().zip(&ann.occlusion) {
        if !win.contains_center(b) {
            continue;
        }
        if let Some(c) = b.clip_to(&region) {
            let moved = c.translate(-win.x, -win.y).scale(f, f);
            if let Some(kept) = moved.clip(target as f64, target as f64) {
                out.boxes.push(kept);
                out.occlusion.push(o);
            }
        }
    }
    let identity = win.x == 0.0 && win.y == 0.0 && target == image.width && target == image.height && win.side == target as f64;
    let patch = if identity { image.clone() } else { image.resample(win.x, win.y, win.side, win.side, target, target) };
    (patch, out)
}

pub fn random_crop<R: Rng + ?Sized>(
    image: &RgbImage,
    ann: &SceneAnnotation,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (RgbImage, SceneAnnotation) {
    let win = sample_crop(image.width, image.height, cfg, rng);
    apply_crop(image, ann, win, cfg.target_train_size)
}

pub fn flip_annotation(ann: &SceneAnnotation, width: usize) -> SceneAnnotation {
    let w = width as f64;
    let boxes = ann
        .boxes
        .iter()
        .map(|b| BBox::new(w - b.x_max(), b.y_min(), w - b.x_min(), b.y_max()).expect("mirror of a valid box"))
        .collect();
    SceneAnnotation { boxes, ..ann.clone() }
}

/// Random horizontal flip, then brightness/contrast jitter clamped to `[0, 1]`.
pub fn flip_and_jitter<R: Rng + ?Sized>(
    image: &RgbImage,
    ann: &SceneAnnotation,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (RgbImage, SceneAnnotation) {
    let (mut img, ann) = if rng.random_bool(cfg.flip_prob) {
        (image.flip_horizontal(), flip_annotation(ann, image.width))
    } else {
        (image.clone(), ann.clone())
    };
    let b = if cfg.brightness > 0.0 { rng.random_range(-cfg.brightness..=cfg.brightness) } else { 0.0 };
    let c = if cfg.contrast > 0.0 { rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) } else { 1.0 };
    if b != 0.0 || c != 1.0 {
        let shift = b + 0.5 * (1.0 - c);
        img.data.iter_mut().for_each(|v| *v = (*v * c + shift).clamp(0.0, 1.0));
    }
    (img, ann)
}
