//! Synthetic scene generation and the on-disk dataset layout.
//!
//! A dataset directory holds `images/<id>.png` (8-bit RGB),
//! `masks/<id>.png` (8-bit class indices, 255 = IGNORE), `classes.json`
//! (names and palette) and, when written by this crate, `manifest.json`.

mod io;
mod synthetic;

pub use io::{encode_png, load_dataset, save_dataset, ClassesFile, Manifest};
pub use synthetic::{eval_spec, generate_scene, generate_synthetic, paint_mask, Shape, SyntheticSpec};

use std::path::PathBuf;

use thiserror::Error;

use crate::domain::{DomainError, GroundTruthMask, Image};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Decode { path: PathBuf, message: String },
    #[error("{}: line {line}, column {column}: {message}", path.display())]
    Json { path: PathBuf, line: usize, column: usize, message: String },
    #[error("image `{0}` has no mask")]
    MissingMask(String),
    #[error("image `{id}` is {image_h}x{image_w} but its mask is {mask_h}x{mask_w}")]
    DimensionMismatch { id: String, image_h: usize, image_w: usize, mask_h: usize, mask_w: usize },
    #[error("dataset inconsistency: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Images with one ground-truth mask each, plus class metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub masks: Vec<GroundTruthMask>,
    pub class_names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    /// Annotation key per class, when the dataset overrides the defaults.
    pub keys: Option<Vec<String>>,
    /// Generator settings, when the dataset is synthetic.
    pub spec: Option<SyntheticSpec>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.images.len() != self.masks.len() {
            return Err(DatasetError::Inconsistent(format!(
                "{} images but {} masks",
                self.images.len(),
                self.masks.len()
            )));
        }
        if self.palette.len() != self.class_names.len() {
            return Err(DatasetError::Inconsistent(format!(
                "{} class names but {} palette entries",
                self.class_names.len(),
                self.palette.len()
            )));
        }
        if let Some(keys) = &self.keys {
            let unique: std::collections::HashSet<&String> = keys.iter().collect();
            if keys.len() != self.class_names.len() || unique.len() != keys.len() || keys.iter().any(|k| k.chars().count() != 1) {
                return Err(DatasetError::Inconsistent("keys must be one distinct character per class".into()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (image, mask) in self.images.iter().zip(&self.masks) {
            if !seen.insert(image.id()) {
                return Err(DatasetError::Inconsistent(format!("duplicate image id `{}`", image.id())));
            }
            if image.id() != mask.image_id() {
                return Err(DatasetError::Inconsistent(format!(
                    "image `{}` paired with mask `{}`",
                    image.id(),
                    mask.image_id()
                )));
            }
            if !mask.matches(image) {
                return Err(DatasetError::DimensionMismatch {
                    id: image.id().to_string(),
                    image_h: image.height(),
                    image_w: image.width(),
                    mask_h: mask.height(),
                    mask_w: mask.width(),
                });
            }
            if mask.num_classes() != self.num_classes() {
                return Err(DatasetError::Inconsistent(format!(
                    "mask `{}` declares {} classes, dataset has {}",
                    mask.image_id(),
                    mask.num_classes(),
                    self.num_classes()
                )));
            }
        }
        Ok(())
    }
}
