use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::{DropoutSource, Workspace};
use super::{AugmentPlan, DropoutMasks, Model, ModelConfig, ModelError, Parameters};
use crate::domain::{AnnotationDatabase, Image, LabelledPixel, ProbabilityMap};
use crate::seed::Stream;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of the labelled classes.
pub fn sparse_ce_loss(probs: &ProbabilityMap, labels: &[LabelledPixel]) -> Result<f64, ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptyLabels);
    }
    let mut total = 0.0;
    for lp in labels {
        if lp.pixel.image_id != probs.image_id() {
            return Err(ModelError::LabelImageMismatch {
                label: lp.pixel.image_id.clone(),
                image: probs.image_id().to_string(),
            });
        }
        if lp.pixel.row >= probs.height() || lp.pixel.col >= probs.width() {
            return Err(ModelError::LabelOutOfBounds(lp.pixel.to_string()));
        }
        let class = usize::from(lp.class_id);
        if class >= probs.num_classes() {
            return Err(ModelError::ClassOutOfRange { class: lp.class_id, num_classes: probs.num_classes() });
        }
        total -= probs.at(lp.pixel.row, lp.pixel.col)[class].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Loss and its gradient with respect to every model parameter.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub gradient: Parameters,
}

fn label_positions(model: &Model, image: &Image, labels: &[LabelledPixel]) -> Result<Vec<(usize, usize)>, ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptyLabels);
    }
    let c = model.config().num_classes;
    labels
        .iter()
        .map(|lp| {
            if lp.pixel.image_id != image.id() {
                return Err(ModelError::LabelImageMismatch {
                    label: lp.pixel.image_id.clone(),
                    image: image.id().to_string(),
                });
            }
            if !image.contains(lp.pixel.row, lp.pixel.col) {
                return Err(ModelError::LabelOutOfBounds(lp.pixel.to_string()));
            }
            if usize::from(lp.class_id) >= c {
                return Err(ModelError::ClassOutOfRange { class: lp.class_id, num_classes: c });
            }
            Ok((lp.pixel.row * image.width() + lp.pixel.col, usize::from(lp.class_id)))
        })
        .collect()
}

fn head_set(positions: &[(usize, usize)]) -> Vec<usize> {
    let mut head: Vec<usize> = positions.iter().map(|&(p, _)| p).collect();
    head.sort_unstable();
    head.dedup();
    head
}

/// Gradient of the mean sparse cross-entropy of the deterministic forward
/// pass. Labels may repeat a pixel; each occurrence counts once in the mean.
pub fn loss_gradient(model: &Model, image: &Image, labels: &[LabelledPixel]) -> Result<LossGradient, ModelError> {
    loss_gradient_masked(model, image, labels, None)
}

/// As [`loss_gradient`], with fixed dropout masks applied after every block.
pub fn loss_gradient_masked(
    model: &Model,
    image: &Image,
    labels: &[LabelledPixel],
    masks: Option<&DropoutMasks>,
) -> Result<LossGradient, ModelError> {
    model.check_ready(image)?;
    let positions = label_positions(model, image, labels)?;
    let head = head_set(&positions);
    let mut ws = Workspace::default();
    ws.load_input(image, None);
    let source = masks.map_or(DropoutSource::Off, DropoutSource::Fixed);
    ws.forward(model.params(), Some(&head), source);
    let mut gradient = model.params().zeros_like();
    let total = ws.backward_sparse_ce(model.params(), &positions, &mut gradient);
    let n = positions.len() as f64;
    gradient.scale(1.0 / n);
    Ok(LossGradient { loss: total / n, gradient })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epoch indices (0-based) at which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Images per optimizer step; the step gradient is the mean over all
    /// labels in the batch.
    pub batch_images: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_decay_epochs: vec![20, 32],
            lr_decay_factor: 0.1,
            batch_images: 4,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidTrainConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_epochs must be strictly increasing");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad("lr_decay_factor must be positive");
        }
        if self.batch_images == 0 {
            return bad("batch_images must be at least 1");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    /// Mean training loss of each epoch, as seen during that epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainedModel {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains a freshly initialised model on every label in `db`.
///
/// Each epoch visits the labelled images in a shuffled order, in batches of
/// `batch_images`, and applies one SGD-with-momentum step per batch
/// (`v = momentum * v + g`, `theta -= lr * v`). Dropout is active during
/// training; augmentation is a random flip and colour jitter when enabled.
pub fn train_round(
    mconfig: &ModelConfig,
    tconfig: &TrainConfig,
    images: &[Image],
    db: &AnnotationDatabase,
) -> Result<TrainedModel, ModelError> {
    tconfig.validate()?;
    let mut model = Model::init(mconfig)?;
    if db.is_empty() {
        return Err(ModelError::EmptyDatabase);
    }
    for id in db.labelled_images() {
        if !images.iter().any(|im| im.id() == id) {
            return Err(ModelError::UnknownImage(id.to_string()));
        }
    }
    let mut items = Vec::new();
    for image in images.iter().filter(|im| db.count_for(im.id()) > 0) {
        model.check_ready(image)?;
        let labels: Vec<LabelledPixel> = db.labels_for(image.id()).into_iter().cloned().collect();
        let positions = label_positions(&model, image, &labels)?;
        items.push((image, positions));
    }

    let rate = mconfig.dropout_rate;
    let mut rng = Stream::new(tconfig.seed, "train").rng();
    let mut ws = Workspace::default();
    let mut velocity = model.params().zeros_like();
    let mut grads = model.params().zeros_like();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tconfig.epochs);
    let mut step_positions = Vec::new();

    for epoch in 0..tconfig.epochs {
        let lr = tconfig.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_count) = (0.0, 0usize);
        for batch in order.chunks(tconfig.batch_images) {
            grads.scale(0.0);
            let mut count = 0usize;
            for &i in batch {
                let (image, positions) = &items[i];
                let plan = tconfig.augment.then(|| AugmentPlan::draw(&mut rng));
                step_positions.clear();
                step_positions.extend(positions.iter().map(|&(p, y)| match plan {
                    Some(plan) => {
                        let w = image.width();
                        ((p / w) * w + plan.map_col(p % w, w), y)
                    }
                    None => (p, y),
                }));
                let head = head_set(&step_positions);
                ws.load_input(image, plan.as_ref());
                let source = if rate > 0.0 {
                    DropoutSource::Sample { rng: &mut rng, rate }
                } else {
                    DropoutSource::Off
                };
                ws.forward(model.params(), Some(&head), source);
                epoch_loss += ws.backward_sparse_ce(model.params(), &step_positions, &mut grads);
                count += step_positions.len();
            }
            epoch_count += count;
            grads.scale(1.0 / count as f64);
            velocity.scale(tconfig.momentum);
            velocity.add_scaled(&grads, 1.0);
            model.params_mut().add_scaled(&velocity, -lr);
        }
        if model.params().first_non_finite().is_some() {
            return Err(ModelError::Diverged { epoch });
        }
        epoch_losses.push(epoch_loss / epoch_count as f64);
    }
    Ok(TrainedModel { model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{LabelSource, PixelRef};
    use rand::Rng;

    fn probs(values: Vec<f64>, c: usize) -> ProbabilityMap {
        let w = values.len() / c;
        ProbabilityMap::new("p", 1, w, c, values).unwrap()
    }

    fn label(col: usize, class: u8) -> LabelledPixel {
        LabelledPixel::new(PixelRef::new("p", 0, col), class, 0, LabelSource::Simulated)
    }

    #[test]
    fn loss_closed_forms() {
        let l = sparse_ce_loss(&probs(vec![0.5, 0.5], 2), &[label(0, 0)]).unwrap();
        assert!((l - 0.693147).abs() < 1e-6);
        let l = sparse_ce_loss(&probs(vec![0.9, 0.1], 2), &[label(0, 1)]).unwrap();
        assert!((l - 2.302585).abs() < 1e-6);
        let two = probs(vec![0.5, 0.5, 0.9, 0.1], 2);
        let a = sparse_ce_loss(&two, &[label(0, 0)]).unwrap();
        let b = sparse_ce_loss(&two, &[label(1, 1)]).unwrap();
        let both = sparse_ce_loss(&two, &[label(0, 0), label(1, 1)]).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn loss_clamps_zero_probability() {
        let l = sparse_ce_loss(&probs(vec![1.0, 0.0], 2), &[label(0, 1)]).unwrap();
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        let p = probs(vec![0.5, 0.5], 2);
        assert!(matches!(sparse_ce_loss(&p, &[]), Err(ModelError::EmptyLabels)));
        assert!(sparse_ce_loss(&p, &[label(3, 0)]).is_err());
        assert!(sparse_ce_loss(&p, &[label(0, 2)]).is_err());
    }

    #[test]
    fn learning_rate_steps_down() {
        let t = TrainConfig::default();
        assert_eq!(t.learning_rate_at(0), 0.05);
        assert_eq!(t.learning_rate_at(19), 0.05);
        assert!((t.learning_rate_at(20) - 0.005).abs() < 1e-15);
        assert!((t.learning_rate_at(39) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn invalid_train_configs() {
        let ok = TrainConfig::default();
        for bad in [
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { lr_decay_epochs: vec![5, 5], ..ok.clone() },
            TrainConfig { batch_images: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    /// Two-colour toy images: class 1 where red dominates.
    fn toy_set(n: usize, seed: u64) -> (Vec<Image>, AnnotationDatabase) {
        let mut rng = Stream::new(seed, "toy").rng();
        let mut db = AnnotationDatabase::new(2);
        let mut images = Vec::new();
        for k in 0..n {
            let id = format!("t{k}");
            let (h, w) = (8, 8);
            let split = rng.random_range(2..6);
            let mut px = Vec::new();
            for _r in 0..h {
                for c in 0..w {
                    let v: [f64; 3] = if c < split { [0.9, 0.1, 0.1] } else { [0.1, 0.1, 0.9] };
                    px.extend(v);
                }
            }
            for _ in 0..4 {
                let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
                let pixel = PixelRef::new(&id, r, c);
                if !db.contains(&pixel) {
                    db.insert(LabelledPixel::new(pixel, u8::from(c < split), 0, LabelSource::Simulated)).unwrap();
                }
            }
            images.push(Image::new(id, h, w, px).unwrap());
        }
        (images, db)
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (images, db) = toy_set(6, 1);
        let m = ModelConfig { num_blocks: 2, channels: 8, num_classes: 2, dropout_rate: 0.1, seed: 3 };
        let t = TrainConfig { epochs: 15, lr_decay_epochs: vec![10], batch_images: 2, ..Default::default() };
        let a = train_round(&m, &t, &images, &db).unwrap();
        assert!(a.final_loss() < a.epoch_losses[0]);
        let b = train_round(&m, &t, &images, &db).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn training_preconditions() {
        let (images, db) = toy_set(2, 2);
        let m = ModelConfig { num_classes: 2, ..Default::default() };
        let zero = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train_round(&m, &zero, &images, &db), Err(ModelError::InvalidTrainConfig(_))));
        let empty = AnnotationDatabase::new(2);
        assert!(matches!(train_round(&m, &TrainConfig::default(), &images, &empty), Err(ModelError::EmptyDatabase)));
        assert!(matches!(
            train_round(&m, &TrainConfig::default(), &images[..1], &db),
            Err(ModelError::UnknownImage(_))
        ));
    }
}
