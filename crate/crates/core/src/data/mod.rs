//! Dataset ingestion, augmentation and the synthetic shapes generator.

pub mod augment;
pub mod manifest;
pub mod synth;
mod vocab;
mod wordvec;

use std::path::Path;

use image::RgbImage;

use crate::{Error, Result};

pub use augment::{augment_train, preprocess_eval, AugmentationConfig, CropMode};
pub use manifest::{load_manifest, DatasetManifest, ManifestRecord};
pub use synth::{generate_synthetic, SyntheticDataset, SyntheticSpec};
pub use vocab::LabelVocabulary;
pub use wordvec::WordVectors;

/// Decoding seam: anything that can turn a path into 8-bit RGB.
pub trait ImageCodec: Send + Sync {
    fn decode(&self, path: &Path) -> Result<RgbImage>;
}

/// Decodes with the `image` crate (PNG enabled).
#[derive(Debug, Clone, Copy, Default)]
pub struct FileCodec;

impl ImageCodec for FileCodec {
    fn decode(&self, path: &Path) -> Result<RgbImage> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Ok(img.to_rgb8())
    }
}
