use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AcquisitionError, UncertaintyMap};
use crate::domain::{GroundTruthMask, PixelRef, IGNORE};
use crate::seed::Stream;

/// Row-major set of pixels that may not be selected in one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl Exclusion {
    pub fn none(height: usize, width: usize) -> Self {
        Self { height, width, mask: vec![false; height * width] }
    }

    /// Takes a row-major mask where `true` marks an excluded pixel.
    pub fn from_mask(height: usize, width: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), height * width, "exclusion mask size");
        Self { height, width, mask }
    }

    /// Excludes the members of `pixels` that belong to `image_id`.
    pub fn from_refs<'a>(
        image_id: &str,
        height: usize,
        width: usize,
        pixels: impl IntoIterator<Item = &'a PixelRef>,
    ) -> Self {
        let mut ex = Self::none(height, width);
        for p in pixels {
            if p.image_id == image_id && p.row < height && p.col < width {
                ex.insert(p.row, p.col);
            }
        }
        ex
    }

    pub fn insert(&mut self, row: usize, col: usize) {
        self.mask[row * self.width + col] = true;
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    /// Row-major indices of the pixels that remain eligible.
    pub fn eligible(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    fn check_shape(&self, height: usize, width: usize) -> Result<(), AcquisitionError> {
        if (self.height, self.width) != (height, width) {
            return Err(AcquisitionError::InvalidConfig(format!(
                "exclusion is {}x{} but the map is {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Sorts row-major indices by uncertainty descending, ties by position.
fn rank(umap: &UncertaintyMap, indices: &mut [usize]) {
    indices.sort_by(|&a, &b| umap.values[b].total_cmp(&umap.values[a]).then(a.cmp(&b)));
}

fn to_refs(image_id: &str, width: usize, mut indices: Vec<usize>) -> Vec<PixelRef> {
    indices.sort_unstable();
    indices.into_iter().map(|i| PixelRef::new(image_id, i / width, i % width)).collect()
}

fn percent_of(percent: f64, count: usize) -> usize {
    // the epsilon keeps exact products such as 5% of 100 from rounding up
    ((percent / 100.0 * count as f64 - 1e-9).ceil().max(0.0) as usize).min(count)
}

fn check_percent(percent: f64) -> Result<(), AcquisitionError> {
    if percent > 0.0 && percent <= 100.0 {
        Ok(())
    } else {
        Err(AcquisitionError::InvalidConfig(format!("percentage {percent} not in (0, 100]")))
    }
}

/// Samples `n` pixels uniformly from the top `top_percent` of the eligible
/// pixels ranked by uncertainty.
///
/// The top set holds `ceil(top_percent / 100 * eligible)` pixels. Draws use
/// `rand::seq::index::sample` on a `ChaCha8Rng` seeded from `seed`, indexing
/// into the ranked top set. Output is in row-major order.
pub fn select_variant_b(
    umap: &UncertaintyMap,
    n: usize,
    top_percent: f64,
    excluded: &Exclusion,
    seed: u64,
) -> Result<Vec<PixelRef>, AcquisitionError> {
    check_percent(top_percent)?;
    excluded.check_shape(umap.height, umap.width)?;
    let mut ranked = excluded.eligible();
    let top_k = percent_of(top_percent, ranked.len());
    if top_k < n {
        return Err(AcquisitionError::Shortfall { image_id: umap.image_id.clone(), needed: n, available: top_k });
    }
    rank(umap, &mut ranked);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, top_k, n).into_iter().map(|i| ranked[i]).collect();
    Ok(to_refs(&umap.image_id, umap.width, picked))
}

/// Subsamples `ceil(subsample_percent / 100 * eligible)` pixels uniformly,
/// then keeps the `n` most uncertain of them.
///
/// The subsample is `rand::seq::index::sample` on a `ChaCha8Rng` seeded from
/// `seed`, indexing into the eligible pixels in row-major order.
pub fn select_variant_a(
    umap: &UncertaintyMap,
    n: usize,
    subsample_percent: f64,
    excluded: &Exclusion,
    seed: u64,
) -> Result<Vec<PixelRef>, AcquisitionError> {
    check_percent(subsample_percent)?;
    excluded.check_shape(umap.height, umap.width)?;
    let eligible = excluded.eligible();
    let k = percent_of(subsample_percent, eligible.len());
    if k < n {
        return Err(AcquisitionError::Shortfall { image_id: umap.image_id.clone(), needed: n, available: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsample: Vec<usize> = index::sample(&mut rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect();
    rank(umap, &mut subsample);
    subsample.truncate(n);
    Ok(to_refs(&umap.image_id, umap.width, subsample))
}

/// Uniformly samples `n` eligible pixels of one image.
pub fn select_random_in_image(
    image_id: &str,
    height: usize,
    width: usize,
    n: usize,
    excluded: &Exclusion,
    seed: u64,
) -> Result<Vec<PixelRef>, AcquisitionError> {
    excluded.check_shape(height, width)?;
    let eligible = excluded.eligible();
    if eligible.len() < n {
        return Err(AcquisitionError::Shortfall { image_id: image_id.to_string(), needed: n, available: eligible.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, eligible.len(), n).into_iter().map(|i| eligible[i]).collect();
    Ok(to_refs(image_id, width, picked))
}

/// Uniformly samples `n` candidates from every image present in
/// `candidates`. Each image draws from its own stream derived from `seed`
/// and its id; results are concatenated in image-id order.
pub fn select_random(candidates: &[PixelRef], n: usize, seed: u64) -> Result<Vec<PixelRef>, AcquisitionError> {
    let mut by_image: BTreeMap<&str, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for p in candidates {
        by_image.entry(&p.image_id).or_default().insert((p.row, p.col));
    }
    let mut out = Vec::with_capacity(by_image.len() * n);
    for (image_id, pool) in by_image {
        if pool.len() < n {
            return Err(AcquisitionError::Shortfall { image_id: image_id.to_string(), needed: n, available: pool.len() });
        }
        let pool: Vec<(usize, usize)> = pool.into_iter().collect();
        let mut rng = Stream::new(seed, "select-random").str(image_id).rng();
        let mut picked: Vec<(usize, usize)> = index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|(r, c)| PixelRef::new(image_id, r, c)));
    }
    Ok(out)
}

/// Mean over queried images of the number of distinct ground-truth classes
/// among that image's queries. IGNORE pixels do not count as a class.
/// Returns 0 for an empty query list.
pub fn class_diversity(queried: &[PixelRef], gts: &[GroundTruthMask]) -> Result<f64, AcquisitionError> {
    let masks: BTreeMap<&str, &GroundTruthMask> = gts.iter().map(|m| (m.image_id(), m)).collect();
    let mut classes: BTreeMap<&str, BTreeSet<u8>> = BTreeMap::new();
    for p in queried {
        let mask = masks.get(p.image_id.as_str()).ok_or_else(|| AcquisitionError::MissingMask(p.image_id.clone()))?;
        let class = mask.get(p.row, p.col).ok_or_else(|| AcquisitionError::OutOfBounds(p.to_string()))?;
        let set = classes.entry(&p.image_id).or_default();
        if class != IGNORE {
            set.insert(class);
        }
    }
    if classes.is_empty() {
        return Ok(0.0);
    }
    Ok(classes.values().map(|s| s.len() as f64).sum::<f64>() / classes.len() as f64)
}
