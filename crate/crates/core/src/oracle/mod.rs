//! Label oracles: ground truth, noise-corrupted ground truth, or a human
//! reached through the annotation server.

mod human;

pub use human::{human_collect, human_request, HumanHandle, HumanLink, HumanOracle, PendingRequest, SubmitError};

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ClassId, GroundTruthMask, LabelSource, LabelledPixel, PixelRef, IGNORE};
use crate::seed::Stream;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("pixel {0} lies outside its mask")]
    OutOfBounds(PixelRef),
    #[error("pixel {0} is IGNORE and cannot be labelled")]
    Ignored(PixelRef),
    #[error("no ground truth for image `{0}`")]
    UnknownImage(String),
    #[error("error rate {0} not in [0, 1]")]
    ErrorRate(f64),
    #[error("noisy labels need at least two classes")]
    TooFewClasses,
    #[error("no proposals to label")]
    EmptyRequest,
    #[error("a labelling request is already pending")]
    Busy,
    #[error("session closed after {} of {expected} labels", received.len())]
    Incomplete { received: Vec<LabelledPixel>, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleKind {
    Simulated,
    Noisy { error_rate: f64 },
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    #[serde(flatten)]
    pub kind: OracleKind,
    pub seed: u64,
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        match self.kind {
            OracleKind::Noisy { error_rate } if !(0.0..=1.0).contains(&error_rate) => {
                Err(OracleError::ErrorRate(error_rate))
            }
            _ => Ok(()),
        }
    }
}

/// Ground-truth class at `u`.
pub fn reveal(gt: &GroundTruthMask, u: &PixelRef) -> Result<ClassId, OracleError> {
    match gt.get(u.row, u.col) {
        None => Err(OracleError::OutOfBounds(u.clone())),
        Some(IGNORE) => Err(OracleError::Ignored(u.clone())),
        Some(c) => Ok(c),
    }
}

/// Ground truth, replaced with probability `error_rate` by a class drawn
/// uniformly from the other classes. The draw depends only on
/// `(seed, image_id, row, col)`.
pub fn reveal_noisy(gt: &GroundTruthMask, u: &PixelRef, error_rate: f64, seed: u64) -> Result<ClassId, OracleError> {
    if !(0.0..=1.0).contains(&error_rate) {
        return Err(OracleError::ErrorRate(error_rate));
    }
    if gt.num_classes() < 2 {
        return Err(OracleError::TooFewClasses);
    }
    let truth = reveal(gt, u)?;
    let mut rng = Stream::new(seed, "noisy-label").str(&u.image_id).u64(u.row as u64).u64(u.col as u64).rng();
    if !rng.random_bool(error_rate) {
        return Ok(truth);
    }
    let other = rng.random_range(0..gt.num_classes() - 1) as ClassId;
    Ok(if other >= truth { other + 1 } else { other })
}

/// Anything that can turn queried pixels into labels.
pub trait Oracle {
    /// Labels `queries` in order, tagging each label with `round`.
    fn label(&mut self, queries: &[PixelRef], round: u32) -> Result<Vec<LabelledPixel>, OracleError>;
}

/// Simulated annotator backed by ground-truth masks, optionally noisy.
pub struct SimulatedOracle<'a> {
    masks: HashMap<&'a str, &'a GroundTruthMask>,
    noise: Option<(f64, u64)>,
}

impl<'a> SimulatedOracle<'a> {
    pub fn exact(masks: &'a [GroundTruthMask]) -> Self {
        Self { masks: masks.iter().map(|m| (m.image_id(), m)).collect(), noise: None }
    }

    pub fn noisy(masks: &'a [GroundTruthMask], error_rate: f64, seed: u64) -> Result<Self, OracleError> {
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(OracleError::ErrorRate(error_rate));
        }
        Ok(Self { noise: Some((error_rate, seed)), ..Self::exact(masks) })
    }
}

impl Oracle for SimulatedOracle<'_> {
    fn label(&mut self, queries: &[PixelRef], round: u32) -> Result<Vec<LabelledPixel>, OracleError> {
        queries
            .iter()
            .map(|u| {
                let gt = self.masks.get(u.image_id.as_str()).ok_or_else(|| OracleError::UnknownImage(u.image_id.clone()))?;
                let (class, source) = match self.noise {
                    None => (reveal(gt, u)?, LabelSource::Simulated),
                    Some((rate, seed)) => (reveal_noisy(gt, u, rate, seed)?, LabelSource::Noisy),
                };
                Ok(LabelledPixel::new(u.clone(), class, round, source))
            })
            .collect()
    }
}
