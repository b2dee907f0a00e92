use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::domain::{ClassId, GroundTruthMask, IGNORE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    /// `None` for classes absent from both ground truth and predictions.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Per-class confusion counts accumulated over a whole evaluation set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    num_classes: usize,
    /// Row = ground truth, column = prediction.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn add(&mut self, pred: &[ClassId], gt: &GroundTruthMask) -> Result<(), EngineError> {
        if pred.len() != gt.classes().len() {
            return Err(EngineError::Shape(format!(
                "prediction for `{}` has {} pixels, mask has {}",
                gt.image_id(),
                pred.len(),
                gt.classes().len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.classes()) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if p >= self.num_classes || g >= self.num_classes {
                return Err(EngineError::Shape(format!("class index out of range in `{}`", gt.image_id())));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn result(&self) -> Result<MiouResult, EngineError> {
        let c = self.num_classes;
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let fn_ = (0..c).map(|p| self.count(k, p)).sum::<u64>() - tp;
                let fp = (0..c).map(|g| self.count(g, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(EngineError::Shape("evaluation set has no labelled pixels".into()));
        }
        Ok(MiouResult { miou: present.iter().sum::<f64>() / present.len() as f64, per_class_iou })
    }
}

/// Mean IoU from one global confusion matrix over all images. IGNORE pixels
/// count towards neither intersection nor union.
pub fn compute_miou(preds: &[Vec<ClassId>], gts: &[GroundTruthMask], num_classes: usize) -> Result<MiouResult, EngineError> {
    if preds.len() != gts.len() {
        return Err(EngineError::Shape(format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let mut confusion = Confusion::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        confusion.add(p, g)?;
    }
    confusion.result()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(classes: Vec<u8>, w: usize, c: usize) -> GroundTruthMask {
        GroundTruthMask::new("m", classes.len() / w, w, c, classes).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = mask(vec![0, 1, 2, 1, IGNORE, 0], 3, 3);
        let pred = vec![0, 1, 2, 1, 2, 0];
        assert_eq!(compute_miou(&[pred], &[gt], 3).unwrap().miou, 1.0);
    }

    #[test]
    fn half_and_half_all_zero() {
        let gt = mask(vec![0, 0, 1, 1], 4, 2);
        let r = compute_miou(&[vec![0; 4]], &[gt], 2).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let gt = mask(vec![0, 0, 1, 1], 4, 4);
        let r = compute_miou(&[vec![0, 0, 1, 1]], &[gt.clone()], 4).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(1.0), Some(1.0), None, None]);
        // predicted but absent from the ground truth: IoU 0 and counted
        let r = compute_miou(&[vec![0, 0, 1, 3]], &[gt], 4).unwrap();
        assert_eq!(r.per_class_iou[3], Some(0.0));
        assert!((r.miou - (1.0 + 0.5 + 0.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aggregation_is_global() {
        // per-image averaging would give a different answer here
        let a = mask(vec![0, 0, 0, 1], 4, 2);
        let b = mask(vec![1, 1, 1, 1], 4, 2);
        let r = compute_miou(&[vec![0, 0, 0, 0], vec![1, 1, 1, 1]], &[a, b], 2).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.75), Some(0.8)]);
    }

    #[test]
    fn shape_errors() {
        let gt = mask(vec![0, 1], 2, 2);
        assert!(compute_miou(&[vec![0]], &[gt.clone()], 2).is_err());
        assert!(compute_miou(&[], &[gt], 2).is_err());
        let all_ignore = mask(vec![IGNORE, IGNORE], 2, 2);
        assert!(compute_miou(&[vec![0, 0]], &[all_ignore], 2).is_err());
    }
}
