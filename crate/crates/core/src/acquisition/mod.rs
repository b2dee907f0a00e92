//! Pixel acquisition: uncertainty scoring and batch selection.
//!
//! Every score is oriented so that larger means more uncertain, which lets
//! one selection path serve all strategies. Ranking is per image, with ties
//! broken by row-major position.

mod dump;
mod score;
mod select;

pub use dump::{read_uncertainty_grid, write_selection_jsonl, write_uncertainty_grid};
pub use score::{score, score_entropy, score_least_confidence, score_margin, UncertaintyMap};
pub use select::{
    class_diversity, select_random, select_random_in_image, select_variant_a, select_variant_b, Exclusion,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("image `{image_id}` has {available} eligible pixels but {needed} were requested")]
    Shortfall { image_id: String, needed: usize, available: usize },
    #[error("invalid acquisition config: {0}")]
    InvalidConfig(String),
    #[error("no ground-truth mask for image `{0}`")]
    MissingMask(String),
    #[error("pixel {0} lies outside its mask")]
    OutOfBounds(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    LeastConfidence,
    Margin,
    Entropy,
}

impl Strategy {
    pub fn short_name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::LeastConfidence => "lc",
            Strategy::Margin => "margin",
            Strategy::Entropy => "entropy",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Strategy::Random),
            "lc" | "least-confidence" => Ok(Strategy::LeastConfidence),
            "margin" | "ms" => Ok(Strategy::Margin),
            "entropy" | "ent" => Ok(Strategy::Entropy),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Diversity heuristic. `VariantB` samples uniformly from the top-ranked
/// fraction of each image; `VariantA` subsamples uniformly first and then
/// keeps the most uncertain pixels of the subsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heuristic {
    VariantA,
    VariantB,
}

impl std::str::FromStr for Heuristic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Heuristic::VariantA),
            "b" => Ok(Heuristic::VariantB),
            other => Err(format!("unknown heuristic `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub strategy: Strategy,
    /// Average Monte Carlo dropout passes before scoring.
    pub committee: bool,
    pub mc_passes: usize,
    /// Top-ranked percentage for variant B; subsample percentage for
    /// variant A.
    pub top_percent: f64,
    pub pixels_per_image: usize,
    pub heuristic: Heuristic,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Margin,
            committee: false,
            mc_passes: crate::model::DEFAULT_MC_PASSES,
            top_percent: 5.0,
            pixels_per_image: 10,
            heuristic: Heuristic::VariantB,
            seed: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<(), AcquisitionError> {
        if self.pixels_per_image == 0 {
            return Err(AcquisitionError::InvalidConfig("pixels_per_image must be at least 1".into()));
        }
        if !(self.top_percent > 0.0 && self.top_percent <= 100.0) {
            return Err(AcquisitionError::InvalidConfig(format!(
                "top_percent {} not in (0, 100]",
                self.top_percent
            )));
        }
        if self.committee && self.mc_passes == 0 {
            return Err(AcquisitionError::InvalidConfig("committee needs mc_passes >= 1".into()));
        }
        Ok(())
    }
}
