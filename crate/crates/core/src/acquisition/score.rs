use super::Strategy;
use crate::domain::ProbabilityMap;

/// Per-pixel uncertainty; larger is more uncertain.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

fn map_pixels(probs: &ProbabilityMap, f: impl Fn(&[f64]) -> f64) -> UncertaintyMap {
    UncertaintyMap {
        image_id: probs.image_id().to_string(),
        height: probs.height(),
        width: probs.width(),
        values: probs.pixels().map(f).collect(),
    }
}

/// `1 - max_c p(c)`.
pub fn score_least_confidence(probs: &ProbabilityMap) -> UncertaintyMap {
    map_pixels(probs, |d| 1.0 - d.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Negated gap between the two largest probabilities.
pub fn score_margin(probs: &ProbabilityMap) -> UncertaintyMap {
    map_pixels(probs, |d| {
        let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &v in d {
            if v > first {
                second = first;
                first = v;
            } else if v > second {
                second = v;
            }
        }
        -(first - second)
    })
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn score_entropy(probs: &ProbabilityMap) -> UncertaintyMap {
    map_pixels(probs, |d| -d.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// Scores with the given strategy; `None` for [`Strategy::Random`].
pub fn score(strategy: Strategy, probs: &ProbabilityMap) -> Option<UncertaintyMap> {
    match strategy {
        Strategy::Random => None,
        Strategy::LeastConfidence => Some(score_least_confidence(probs)),
        Strategy::Margin => Some(score_margin(probs)),
        Strategy::Entropy => Some(score_entropy(probs)),
    }
}
