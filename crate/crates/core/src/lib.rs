//! Pixel-level pool-based active learning for semantic segmentation.
//!
//! A small fully-convolutional model is trained from scratch each round on
//! a sparse set of labelled pixels. The trained model scores every unlabelled
//! pixel, an acquisition strategy picks the next batch of coordinates, and an
//! oracle (ground truth, noisy ground truth or a human annotator) labels them.
//!
//! Module map:
//!
//! - [`domain`]: images, masks, probability maps, pixel references and the
//!   annotation database with its JSON Lines persistence.
//! - [`model`]: the convolutional segmentation model, its exact gradients and
//!   the per-round training procedure.
//! - [`acquisition`]: uncertainty scores and the pixel selection heuristics.
//! - [`oracle`]: label sources answering pixel queries.
//! - [`datasets`]: the synthetic scene generator and on-disk dataset I/O.
//! - [`engine`]: the active-learning loop, mIoU evaluation and the ablation
//!   studies.

pub mod acquisition;
pub mod datasets;
pub mod domain;
pub mod engine;
pub mod model;
pub mod oracle;
pub mod seed;

pub use domain::{
    candidate_pool, softmax_normalize, AnnotationDatabase, ClassId, DomainError, GroundTruthMask,
    Image, LabelSource, LabelledPixel, Logits, PixelRef, ProbabilityMap, IGNORE,
};
