//! Training augmentation (resize, random-scale crop, resize, flip, normalize)
//! and the deterministic evaluation transform.

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::Array3;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    /// Width and height drawn separately from the scale set.
    Independent,
    /// One draw used for both sides.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub resize_base: u32,
    pub crop_scales: Vec<u32>,
    pub final_size: u32,
    pub hflip_probability: f64,
    pub crop_mode: CropMode,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            resize_base: 512,
            crop_scales: vec![512, 448, 384, 320, 256],
            final_size: 448,
            hflip_probability: 0.5,
            crop_mode: CropMode::Independent,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentationConfig {
    pub fn desk() -> Self {
        AugmentationConfig {
            resize_base: 64,
            crop_scales: vec![64, 56, 48],
            final_size: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.final_size == 0 || self.resize_base == 0 {
            return Err(Error::Config("augment sizes must be positive".into()));
        }
        if self.crop_scales.is_empty() {
            return Err(Error::Config("augment.crop_scales is empty".into()));
        }
        if let Some(&s) = self.crop_scales.iter().find(|&&s| s == 0 || s > self.resize_base) {
            return Err(Error::Config(format!(
                "augment.crop_scales entry {s} must lie in 1..={}",
                self.resize_base
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::Config("augment.hflip_probability must lie in [0, 1]".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("augment.std entries must be positive".into()));
        }
        Ok(())
    }
}

/// What a single augmentation draw did, for the sample log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub crop_width: u32,
    pub crop_height: u32,
    pub crop_x: u32,
    pub crop_y: u32,
    pub flipped: bool,
}

fn check_size(image: &RgbImage) -> Result<()> {
    if image.width() < 2 || image.height() < 2 {
        return Err(Error::Image(format!(
            "image {}x{} is smaller than 2x2",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

fn resize(image: &RgbImage, width: u32, height: u32) -> RgbImage {
    if image.width() == width && image.height() == height {
        image.clone()
    } else {
        imageops::resize(image, width, height, FilterType::Triangle)
    }
}

pub fn normalize(image: &RgbImage, cfg: &AugmentationConfig) -> ImageTensor {
    let (w, h) = image.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in image.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = (px[c] as f64 / 255.0 - cfg.mean[c]) / cfg.std[c];
        }
    }
    ImageTensor(out)
}

pub fn augment_train<R: Rng + ?Sized>(
    image: &RgbImage,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(ImageTensor, AugmentRecord)> {
    check_size(image)?;
    let base = resize(image, cfg.resize_base, cfg.resize_base);
    let pick = |rng: &mut R| *cfg.crop_scales.choose(rng).expect("validated non-empty");
    let crop_width = pick(rng);
    let crop_height = match cfg.crop_mode {
        CropMode::Independent => pick(rng),
        CropMode::Single => crop_width,
    };
    let crop_x = rng.random_range(0..=cfg.resize_base - crop_width);
    let crop_y = rng.random_range(0..=cfg.resize_base - crop_height);
    let cropped = imageops::crop_imm(&base, crop_x, crop_y, crop_width, crop_height).to_image();
    let mut out = resize(&cropped, cfg.final_size, cfg.final_size);
    let flipped = rng.random_bool(cfg.hflip_probability);
    if flipped {
        imageops::flip_horizontal_in_place(&mut out);
    }
    Ok((
        normalize(&out, cfg),
        AugmentRecord {
            crop_width,
            crop_height,
            crop_x,
            crop_y,
            flipped,
        },
    ))
}

pub fn preprocess_eval(image: &RgbImage, cfg: &AugmentationConfig) -> Result<ImageTensor> {
    check_size(image)?;
    Ok(normalize(&resize(image, cfg.final_size, cfg.final_size), cfg))
}
