//! Domain types shared by every other module.

mod db;
mod image;
mod labels;
mod probs;

pub use db::{append_label, candidate_pool, AnnotationDatabase};
pub use image::{GroundTruthMask, Image, IGNORE};
pub use labels::{ClassId, LabelSource, LabelledPixel, PixelRef};
pub use probs::{softmax_normalize, Logits, ProbabilityMap};
pub(crate) use probs::softmax_into;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid dimensions {height}x{width} for `{id}`")]
    EmptyImage { id: String, height: usize, width: usize },
    #[error("buffer for `{id}` has {actual} values, expected {expected}")]
    BufferSize { id: String, expected: usize, actual: usize },
    #[error("channel value {value} at ({row}, {col}) of `{id}` is outside [0, 1]")]
    ChannelRange { id: String, row: usize, col: usize, value: f64 },
    #[error("mask `{id}` holds class {class} at ({row}, {col}) but only {num_classes} classes exist")]
    MaskClass { id: String, row: usize, col: usize, class: ClassId, num_classes: usize },
    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),
    #[error("non-finite logit {value} at ({row}, {col}) channel {channel} of `{id}`")]
    NonFiniteLogit { id: String, row: usize, col: usize, channel: usize, value: f64 },
    #[error("pixel ({row}, {col}) of `{id}` is not a distribution: {reason}")]
    NotSimplex { id: String, row: usize, col: usize, reason: String },
    #[error("pixel {0} is already labelled")]
    DuplicateLabel(PixelRef),
    #[error("class {class} of {pixel} is out of range for {num_classes} classes")]
    ClassOutOfRange { pixel: PixelRef, class: ClassId, num_classes: usize },
    #[error("label for {pixel} has round {round}, earlier than the last inserted round {last}")]
    RoundOrder { pixel: PixelRef, round: u32, last: u32 },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
