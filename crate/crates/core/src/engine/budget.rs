use rand::seq::index;

use super::EngineError;
use crate::seed::Stream;

/// Number of images an annotation diversity ratio selects out of `total`.
pub fn images_for_ratio(total: usize, eta: f64) -> usize {
    ((eta * total as f64).round() as usize).clamp(1, total.max(1))
}

/// Indices of the `images_for_ratio(total, eta)` images taking part, in
/// seeded order.
pub fn choose_images(total: usize, eta: f64, seed: u64) -> Result<Vec<usize>, EngineError> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(EngineError::Config(format!("diversity ratio {eta} not in (0, 1]")));
    }
    if total == 0 {
        return Err(EngineError::Config("dataset is empty".into()));
    }
    let k = images_for_ratio(total, eta);
    let mut rng = Stream::new(seed, "choose-images").rng();
    Ok(index::sample(&mut rng, total, k).into_vec())
}

/// Spreads `total_pixels` evenly over the chosen images. Returns
/// `(image index, labels)` pairs in seeded order; the first
/// `total_pixels % images` entries carry one extra label.
pub fn distribute_budget(total_pixels: usize, num_images: usize, eta: f64, seed: u64) -> Result<Vec<(usize, usize)>, EngineError> {
    let chosen = choose_images(num_images, eta, seed)?;
    if total_pixels < chosen.len() {
        return Err(EngineError::Config(format!(
            "budget of {total_pixels} pixels cannot cover {} images",
            chosen.len()
        )));
    }
    let base = total_pixels / chosen.len();
    let extra = total_pixels % chosen.len();
    Ok(chosen.into_iter().enumerate().map(|(k, i)| (i, base + usize::from(k < extra))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let all = distribute_budget(100, 100, 1.0, 0).unwrap();
        assert_eq!(all.len(), 100);
        assert!(all.iter().all(|&(_, n)| n == 1));
        let half = distribute_budget(100, 100, 0.5, 0).unwrap();
        assert_eq!(half.len(), 50);
        assert!(half.iter().all(|&(_, n)| n == 2));
        assert_eq!(distribute_budget(1000, 100, 0.01, 0).unwrap().len(), 1);
        assert_eq!(distribute_budget(1000, 100, 0.01, 0).unwrap()[0].1, 1000);
    }

    #[test]
    fn errors() {
        assert!(distribute_budget(10, 100, 0.5, 0).is_err());
        assert!(distribute_budget(10, 100, 0.0, 0).is_err());
        assert!(distribute_budget(10, 100, 1.5, 0).is_err());
        assert!(distribute_budget(10, 0, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn allocation_is_exact_and_even(total in 1usize..5000, n in 1usize..200, eta in 0.001f64..=1.0, seed: u64) {
            match distribute_budget(total, n, eta, seed) {
                Err(_) => prop_assert!(total < images_for_ratio(n, eta)),
                Ok(alloc) => {
                    prop_assert_eq!(alloc.len(), ((eta * n as f64).round() as usize).max(1).min(n));
                    prop_assert_eq!(alloc.iter().map(|a| a.1).sum::<usize>(), total);
                    let lo = alloc.iter().map(|a| a.1).min().unwrap();
                    let hi = alloc.iter().map(|a| a.1).max().unwrap();
                    prop_assert!(hi - lo <= 1 && lo >= 1);
                    let distinct: std::collections::HashSet<_> = alloc.iter().map(|a| a.0).collect();
                    prop_assert_eq!(distinct.len(), alloc.len());
                    prop_assert!(alloc.iter().all(|a| a.0 < n));
                }
            }
        }
    }
}
