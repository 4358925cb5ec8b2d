//! Multi-label image recognition with category-specific attentional regions
//! and an adaptive object-erasing regularizer.
//!
//! The crate is organised by subsystem:
//!
//! * [`graph`]: label-graph network producing contextualized category embeddings.
//! * [`backbone`]: convolutional feature extractor behind the [`backbone::FeatureExtractor`] seam.
//! * [`car`]: per-category channel/spatial attention, fusion and max pooling.
//! * [`erasing`]: top-K selection, marginal profiles and region erasure.
//! * [`heads`]: linear per-category classifier and binary cross-entropy.
//! * [`metrics`]: mAP and the overall/per-class precision, recall and F1.
//! * [`data`]: manifests, word vectors, augmentation and the synthetic generator.
//! * [`harness`]: training, evaluation, inference and visualization drivers.

pub mod backbone;
pub mod car;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod erasing;
pub mod error;
pub mod graph;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;

pub use error::{Error, Result};
