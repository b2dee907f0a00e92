//! Analytic gradients against central finite differences of the loss
//! computed through the dense forward pass.

use pixelpick_core::model::{loss_gradient, loss_gradient_masked, sparse_ce_loss, DropoutMasks, Model, ModelConfig, ParamSlot};
use pixelpick_core::seed::Stream;
use pixelpick_core::{softmax_normalize, Image, LabelSource, LabelledPixel, PixelRef};
use rand::Rng;

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-3;

fn random_image(id: &str, h: usize, w: usize, seed: u64) -> Image {
    let mut rng = Stream::new(seed, "grad-image").rng();
    Image::new(id, h, w, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn random_labels(image: &Image, n: usize, classes: usize, seed: u64) -> Vec<LabelledPixel> {
    let mut rng = Stream::new(seed, "grad-labels").rng();
    (0..n)
        .map(|_| {
            LabelledPixel::new(
                PixelRef::new(image.id(), rng.random_range(0..image.height()), rng.random_range(0..image.width())),
                rng.random_range(0..classes) as u8,
                0,
                LabelSource::Simulated,
            )
        })
        .collect()
}

fn dense_loss(model: &Model, image: &Image, labels: &[LabelledPixel], masks: Option<&DropoutMasks>) -> f64 {
    let logits = model.forward_with_masks(image, masks).unwrap();
    sparse_ce_loss(&softmax_normalize(&logits).unwrap(), labels).unwrap()
}

/// Checks `count` random parameters of each tensor kind (block weights,
/// block biases, head weights, head bias) and returns the worst relative error.
fn check(model: &Model, image: &Image, labels: &[LabelledPixel], masks: Option<&DropoutMasks>, count: usize, seed: u64) -> f64 {
    let analytic = loss_gradient_masked(model, image, labels, masks).unwrap();
    let reference_loss = dense_loss(model, image, labels, masks);
    assert!((analytic.loss - reference_loss).abs() < 1e-10);

    let params = model.params();
    let mut by_kind: [Vec<usize>; 4] = Default::default();
    for i in 0..params.len() {
        let kind = match params.locate(i).unwrap().0 {
            ParamSlot::BlockWeight(_) => 0,
            ParamSlot::BlockBias(_) => 1,
            ParamSlot::HeadWeight => 2,
            ParamSlot::HeadBias => 3,
        };
        by_kind[kind].push(i);
    }
    let mut rng = Stream::new(seed, "grad-pick").rng();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for indices in &by_kind {
        for _ in 0..count {
            let i = indices[rng.random_range(0..indices.len())];
            let mut plus = model.clone();
            plus.params_mut().set(i, params.get(i) + STEP);
            let mut minus = model.clone();
            minus.params_mut().set(i, params.get(i) - STEP);
            let base = reference_loss;
            let forward = (dense_loss(&plus, image, labels, masks) - base) / STEP;
            let backward = (base - dense_loss(&minus, image, labels, masks)) / STEP;
            let numeric = (forward + backward) / 2.0;
            let a = analytic.gradient.get(i);
            // both sides vanish for parameters that only see ReLU-dead units
            if a.abs() < 1e-10 && numeric.abs() < 1e-8 {
                continue;
            }
            // a ReLU kink inside the stencil makes the one-sided slopes disagree
            if (forward - backward).abs() > TOLERANCE * (forward.abs() + backward.abs() + 1e-8) {
                continue;
            }
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked >= 2 * count, "too few non-degenerate parameters checked ({checked})");
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for (blocks, seed) in [(1, 1u64), (2, 2), (3, 3)] {
        let cfg = ModelConfig { num_blocks: blocks, channels: 6, num_classes: 4, dropout_rate: 0.0, seed };
        let model = Model::init(&cfg).unwrap();
        let image = random_image("g", 9, 8, seed);
        let labels = random_labels(&image, 7, 4, seed);
        let worst = check(&model, &image, &labels, None, 20, seed);
        assert!(worst < TOLERANCE, "blocks={blocks}: worst relative error {worst}");
    }
}

#[test]
fn gradient_matches_with_fixed_dropout_masks() {
    let cfg = ModelConfig { num_blocks: 2, channels: 8, num_classes: 3, dropout_rate: 0.3, seed: 5 };
    let model = Model::init(&cfg).unwrap();
    let image = random_image("d", 8, 8, 7);
    let labels = random_labels(&image, 6, 3, 7);
    let masks = DropoutMasks::sample(&cfg, 8, 8, 99);
    let worst = check(&model, &image, &labels, Some(&masks), 20, 11);
    assert!(worst < TOLERANCE, "worst relative error {worst}");
}

#[test]
fn taps_outside_the_labelled_receptive_field_get_zero_gradient() {
    // one block: the logit at (0, 0) reads inputs at rows/cols -1..=1, so
    // every weight on a tap with ky = 0 or kx = 0 only ever multiplies padding
    let cfg = ModelConfig { num_blocks: 1, channels: 4, num_classes: 3, dropout_rate: 0.0, seed: 2 };
    let model = Model::init(&cfg).unwrap();
    let image = random_image("l", 6, 6, 3);
    let labels = vec![LabelledPixel::new(PixelRef::new("l", 0, 0), 2, 0, LabelSource::Simulated)];
    let g = loss_gradient(&model, &image, &labels).unwrap().gradient;
    let layer = &g.blocks[0];
    let mut nonzero_inside = false;
    for ky in 0..3 {
        for kx in 0..3 {
            for i in 0..3 {
                for o in 0..4 {
                    let v = layer.weights[layer.weight_index(ky, kx, i, o)];
                    if ky == 0 || kx == 0 {
                        assert_eq!(v, 0.0);
                    } else if v != 0.0 {
                        nonzero_inside = true;
                    }
                }
            }
        }
    }
    assert!(nonzero_inside);
}

#[test]
fn duplicating_every_label_leaves_the_gradient_unchanged() {
    let cfg = ModelConfig { num_blocks: 2, channels: 5, num_classes: 3, dropout_rate: 0.0, seed: 8 };
    let model = Model::init(&cfg).unwrap();
    let image = random_image("u", 7, 7, 4);
    let labels = random_labels(&image, 5, 3, 4);
    let doubled: Vec<_> = labels.iter().chain(&labels).cloned().collect();
    let a = loss_gradient(&model, &image, &labels).unwrap();
    let b = loss_gradient(&model, &image, &doubled).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    for (x, y) in a.gradient.to_flat().iter().zip(b.gradient.to_flat()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn empty_label_set_is_an_error() {
    let model = Model::init(&ModelConfig::default()).unwrap();
    let image = random_image("e", 4, 4, 0);
    assert!(loss_gradient(&model, &image, &[]).is_err());
}
