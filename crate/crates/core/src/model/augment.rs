use rand::Rng;

use crate::domain::{Image, LabelledPixel};
use crate::seed::Stream;

/// A drawn augmentation: an optional horizontal flip and a per-channel
/// colour scale. Only the flip moves label coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub scales: [f64; 3],
}

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan = AugmentPlan { flip: false, scales: [1.0; 3] };

    /// Flip with probability 0.5, channel scales uniform in `[0.8, 1.2]`.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = rng.random_bool(0.5);
        let scales = [0; 3].map(|_| rng.random_range(0.8..=1.2));
        Self { flip, scales }
    }

    pub(crate) fn photometric(&self, value: f64, channel: usize) -> f64 {
        (value * self.scales[channel]).clamp(0.0, 1.0)
    }

    pub fn map_col(&self, col: usize, width: usize) -> usize {
        if self.flip {
            width - 1 - col
        } else {
            col
        }
    }
}

/// Applies `plan` to an image and the labels that belong to it.
pub fn apply_augment(image: &Image, labels: &[LabelledPixel], plan: &AugmentPlan) -> (Image, Vec<LabelledPixel>) {
    let (h, w) = (image.height(), image.width());
    let src = image.pixels();
    let mut px = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let s = (r * w + plan.map_col(c, w)) * 3;
            let d = (r * w + c) * 3;
            for k in 0..3 {
                px[d + k] = plan.photometric(src[s + k], k);
            }
        }
    }
    let out = Image::new(image.id(), h, w, px).expect("augmented values stay in [0, 1]");
    let labels = labels
        .iter()
        .map(|lp| {
            let mut lp = lp.clone();
            lp.pixel.col = plan.map_col(lp.pixel.col, w);
            lp
        })
        .collect();
    (out, labels)
}

/// Draws a plan from `seed` and applies it.
pub fn augment(image: &Image, labels: &[LabelledPixel], seed: u64) -> (Image, Vec<LabelledPixel>) {
    let plan = AugmentPlan::draw(&mut Stream::new(seed, "augment").str(image.id()).rng());
    apply_augment(image, labels, &plan)
}
