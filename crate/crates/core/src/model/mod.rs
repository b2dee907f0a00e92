//! A small fully-convolutional segmentation network with hand-derived
//! gradients.
//!
//! Architecture: `num_blocks` repetitions of 3x3 convolution (stride 1, zero
//! padding), ReLU and optional inverted dropout, followed by a 1x1
//! convolution producing one logit per class. Output resolution equals input
//! resolution. Inputs are shifted by -0.5 so channel values are centred.

mod augment;
mod checkpoint;
mod layers;
mod train;

pub use augment::{apply_augment, augment, AugmentPlan};
pub use layers::DropoutMasks;
pub use train::{loss_gradient, loss_gradient_masked, sparse_ce_loss, train_round, LossGradient, TrainConfig, TrainedModel};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{softmax_normalize, DomainError, Image, Logits, ProbabilityMap};
use crate::seed::Stream;
use layers::{DropoutSource, Workspace};

/// Default Monte Carlo committee size.
pub const DEFAULT_MC_PASSES: usize = 20;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("image `{id}` is {height}x{width}; at least 3x3 is required")]
    ImageTooSmall { id: String, height: usize, width: usize },
    #[error("model parameter {index} is not finite")]
    NonFiniteParameter { index: usize },
    #[error("the label set is empty; the mean loss is undefined")]
    EmptyLabels,
    #[error("label {0} lies outside its image")]
    LabelOutOfBounds(String),
    #[error("label for image `{label}` passed with image `{image}`")]
    LabelImageMismatch { label: String, image: String },
    #[error("class {class} is out of range for {num_classes} classes")]
    ClassOutOfRange { class: u8, num_classes: usize },
    #[error("the annotation database is empty; bootstrap it with randomly sampled pixels first")]
    EmptyDatabase,
    #[error("labelled image `{0}` is not part of the training set")]
    UnknownImage(String),
    #[error("Monte Carlo inference needs dropout_rate > 0")]
    DegenerateCommittee,
    #[error("training diverged: non-finite parameters after epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of conv/ReLU/dropout blocks, the depth knob.
    pub num_blocks: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { num_blocks: 3, channels: 16, num_classes: 4, dropout_rate: 0.1, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(1..=8).contains(&self.num_blocks) {
            return bad(format!("num_blocks {} not in [1, 8]", self.num_blocks));
        }
        if !(4..=64).contains(&self.channels) {
            return bad(format!("channels {} not in [4, 64]", self.channels));
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes {} not in [2, 255]", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Half-width of the receptive field, in pixels.
    pub fn receptive_radius(&self) -> usize {
        self.num_blocks
    }
}

/// One convolution. Weights are laid out `[ky][kx][in][out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            in_channels,
            out_channels,
            weights: vec![0.0; kernel * kernel * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn weight_index(&self, ky: usize, kx: usize, input: usize, output: usize) -> usize {
        ((ky * self.kernel + kx) * self.in_channels + input) * self.out_channels + output
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn shape_matches(&self, other: &Self) -> bool {
        self.kernel == other.kernel
            && self.in_channels == other.in_channels
            && self.out_channels == other.out_channels
            && self.weights.len() == other.weights.len()
            && self.bias.len() == other.bias.len()
    }
}

/// Which tensor a flat parameter index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    BlockWeight(usize),
    BlockBias(usize),
    HeadWeight,
    HeadBias,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub blocks: Vec<ConvLayer>,
    pub head: ConvLayer,
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        let blocks = (0..config.num_blocks)
            .map(|b| ConvLayer::zeros(3, if b == 0 { 3 } else { config.channels }, config.channels))
            .collect();
        Self { blocks, head: ConvLayer::zeros(1, config.channels, config.num_classes) }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|l| ConvLayer::zeros(l.kernel, l.in_channels, l.out_channels))
                .collect(),
            head: ConvLayer::zeros(self.head.kernel, self.head.in_channels, self.head.out_channels),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = (ParamSlot, &Vec<f64>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(b, l)| [(ParamSlot::BlockWeight(b), &l.weights), (ParamSlot::BlockBias(b), &l.bias)])
            .chain([(ParamSlot::HeadWeight, &self.head.weights), (ParamSlot::HeadBias, &self.head.bias)])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.blocks
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .chain([&mut self.head.weights, &mut self.head.bias])
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(ConvLayer::num_params).sum::<usize>() + self.head.num_params()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view, in block order (weights then bias), head last.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    /// Resolves a flat index to its tensor and offset.
    pub fn locate(&self, mut index: usize) -> Option<(ParamSlot, usize)> {
        for (slot, t) in self.tensors() {
            if index < t.len() {
                return Some((slot, index));
            }
            index -= t.len();
        }
        None
    }

    pub fn get(&self, index: usize) -> f64 {
        let (slot, offset) = self.locate(index).expect("parameter index in range");
        self.tensor(slot)[offset]
    }

    pub fn set(&mut self, index: usize, value: f64) {
        let (slot, offset) = self.locate(index).expect("parameter index in range");
        self.tensor_mut(slot)[offset] = value;
    }

    pub fn tensor(&self, slot: ParamSlot) -> &[f64] {
        match slot {
            ParamSlot::BlockWeight(b) => &self.blocks[b].weights,
            ParamSlot::BlockBias(b) => &self.blocks[b].bias,
            ParamSlot::HeadWeight => &self.head.weights,
            ParamSlot::HeadBias => &self.head.bias,
        }
    }

    fn tensor_mut(&mut self, slot: ParamSlot) -> &mut [f64] {
        match slot {
            ParamSlot::BlockWeight(b) => &mut self.blocks[b].weights,
            ParamSlot::BlockBias(b) => &mut self.blocks[b].bias,
            ParamSlot::HeadWeight => &mut self.head.weights,
            ParamSlot::HeadBias => &mut self.head.bias,
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        for (dst, (_, src)) in self.tensors_mut().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.tensors().flat_map(|(_, t)| t.iter()).position(|v| !v.is_finite())
    }

    fn shape_matches(&self, config: &ModelConfig) -> bool {
        let reference = Parameters::zeros(config);
        self.blocks.len() == reference.blocks.len()
            && self.blocks.iter().zip(&reference.blocks).all(|(a, b)| a.shape_matches(b))
            && self.head.shape_matches(&reference.head)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Parameters,
}

impl Model {
    /// Fresh model: weights uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`
    /// for ReLU blocks and `b = sqrt(3 / fan_in)` for the linear head; biases
    /// zero. Deterministic in `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = Parameters::zeros(config);
        let mut rng = Stream::new(config.seed, "init").rng();
        for layer in &mut params.blocks {
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            layer.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..=bound));
        }
        let bound = (3.0 / params.head.fan_in() as f64).sqrt();
        params.head.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..=bound));
        Ok(Self { config: config.clone(), params })
    }

    pub fn from_parameters(config: ModelConfig, params: Parameters) -> Result<Self, ModelError> {
        config.validate()?;
        if !params.shape_matches(&config) {
            return Err(ModelError::InvalidConfig("parameter shapes do not match the config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    fn check_ready(&self, image: &Image) -> Result<(), ModelError> {
        if image.height() < 3 || image.width() < 3 {
            return Err(ModelError::ImageTooSmall {
                id: image.id().to_string(),
                height: image.height(),
                width: image.width(),
            });
        }
        if let Some(index) = self.params.first_non_finite() {
            return Err(ModelError::NonFiniteParameter { index });
        }
        Ok(())
    }

    /// Deterministic forward pass (dropout disabled).
    pub fn forward(&self, image: &Image) -> Result<Logits, ModelError> {
        self.forward_with_masks(image, None)
    }

    /// Forward pass with fixed dropout masks; `None` disables dropout.
    pub fn forward_with_masks(&self, image: &Image, masks: Option<&DropoutMasks>) -> Result<Logits, ModelError> {
        self.check_ready(image)?;
        let source = match masks {
            Some(m) => DropoutSource::Fixed(m),
            None => DropoutSource::Off,
        };
        let mut ws = Workspace::default();
        ws.load_input(image, None);
        ws.forward(&self.params, None, source);
        Ok(ws.logits_full(image.id(), self.config.num_classes))
    }

    /// Class probabilities. With `mc_passes = 0` dropout is disabled; with
    /// `mc_passes = T` the result is the mean of `T` dropout-perturbed
    /// softmax outputs, each drawn from a stream keyed by `seed`, the image id
    /// and the pass index.
    pub fn predict(&self, image: &Image, mc_passes: usize, seed: u64) -> Result<ProbabilityMap, ModelError> {
        if mc_passes == 0 {
            return Ok(softmax_normalize(&self.forward(image)?)?);
        }
        if self.config.dropout_rate <= 0.0 {
            return Err(ModelError::DegenerateCommittee);
        }
        self.check_ready(image)?;
        let c = self.config.num_classes;
        let mut ws = Workspace::default();
        ws.load_input(image, None);
        let mut mean = vec![0.0; image.num_pixels() * c];
        for pass in 0..mc_passes {
            let mut rng = Stream::new(seed, "mc-dropout").str(image.id()).u64(pass as u64).rng();
            ws.forward(&self.params, None, DropoutSource::Sample { rng: &mut rng, rate: self.config.dropout_rate });
            let probs = softmax_normalize(&ws.logits_full(image.id(), c))?;
            for (m, p) in mean.iter_mut().zip(probs.values()) {
                *m += p;
            }
        }
        let inv = 1.0 / mc_passes as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        Ok(ProbabilityMap::new(image.id(), image.height(), image.width(), c, mean)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(id: &str, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = Stream::new(seed, "test-image").rng();
        Image::new(id, h, w, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig { seed: 11, ..Default::default() };
        assert_eq!(Model::init(&cfg).unwrap(), Model::init(&cfg).unwrap());
        let other = ModelConfig { seed: 12, ..cfg.clone() };
        assert_ne!(Model::init(&cfg).unwrap().params().to_flat(), Model::init(&other).unwrap().params().to_flat());
    }

    #[test]
    fn biases_start_at_zero_and_weights_respect_bounds() {
        let m = Model::init(&ModelConfig::default()).unwrap();
        for l in &m.params().blocks {
            assert!(l.bias.iter().all(|&b| b == 0.0));
            let bound = (6.0 / l.fan_in() as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= bound));
        }
        assert!(m.params().head.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn one_block_parameter_count() {
        for (channels, classes) in [(16, 4), (4, 2), (64, 7)] {
            let cfg = ModelConfig { num_blocks: 1, channels, num_classes: classes, ..Default::default() };
            let expected = 3 * 3 * 3 * channels + channels + channels * classes + classes;
            assert_eq!(Model::init(&cfg).unwrap().num_parameters(), expected);
        }
    }

    #[test]
    fn config_bounds() {
        let ok = ModelConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            ModelConfig { num_blocks: 0, ..ok.clone() },
            ModelConfig { num_blocks: 9, ..ok.clone() },
            ModelConfig { channels: 3, ..ok.clone() },
            ModelConfig { channels: 65, ..ok.clone() },
            ModelConfig { dropout_rate: 1.0, ..ok.clone() },
            ModelConfig { num_classes: 1, ..ok.clone() },
        ] {
            assert!(Model::init(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let cfg = ModelConfig::default();
        let model = Model::from_parameters(cfg.clone(), Parameters::zeros(&cfg)).unwrap();
        let image = noise_image("z", 6, 5, 1);
        let logits = model.forward(&image).unwrap();
        assert!(logits.values.iter().all(|&v| v == 0.0));
        let probs = model.predict(&image, 0, 0).unwrap();
        assert!(probs.values().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn output_shape_follows_input() {
        let model = Model::init(&ModelConfig { num_classes: 5, ..Default::default() }).unwrap();
        for (h, w) in [(3, 3), (4, 9), (17, 5)] {
            let logits = model.forward(&noise_image("s", h, w, 2)).unwrap();
            assert_eq!((logits.height, logits.width, logits.num_classes), (h, w, 5));
            assert_eq!(logits.values.len(), h * w * 5);
            assert!(logits.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn tiny_images_are_rejected() {
        let model = Model::init(&ModelConfig::default()).unwrap();
        let err = model.forward(&noise_image("t", 2, 8, 0)).unwrap_err();
        assert!(matches!(err, ModelError::ImageTooSmall { .. }));
    }

    #[test]
    fn non_finite_parameters_are_reported() {
        let mut model = Model::init(&ModelConfig::default()).unwrap();
        model.params_mut().set(5, f64::NAN);
        assert!(matches!(model.forward(&noise_image("n", 4, 4, 0)), Err(ModelError::NonFiniteParameter { index: 5 })));
    }

    fn mirror(image: &Image) -> Image {
        let (h, w) = (image.height(), image.width());
        let mut px = vec![0.0; h * w * 3];
        for r in 0..h {
            for c in 0..w {
                let src = image.rgb(r, w - 1 - c);
                px[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&src);
            }
        }
        Image::new(image.id(), h, w, px).unwrap()
    }

    #[test]
    fn symmetric_kernels_commute_with_horizontal_flip() {
        let cfg = ModelConfig { num_blocks: 3, channels: 8, num_classes: 3, ..Default::default() };
        let mut model = Model::init(&cfg).unwrap();
        // make every 3x3 kernel left-right symmetric: w[ky][2] = w[ky][0]
        for layer in &mut model.params_mut().blocks {
            for ky in 0..3 {
                for i in 0..layer.in_channels {
                    for o in 0..layer.out_channels {
                        let v = layer.weights[layer.weight_index(ky, 0, i, o)];
                        let j = layer.weight_index(ky, 2, i, o);
                        layer.weights[j] = v;
                    }
                }
            }
        }
        let image = noise_image("f", 9, 11, 3);
        let direct = model.forward(&image).unwrap();
        let flipped = model.forward(&mirror(&image)).unwrap();
        for r in 0..9 {
            for c in 0..11 {
                for (a, b) in direct.at(r, c).iter().zip(flipped.at(r, 10 - c)) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn interior_logits_are_shift_equivariant() {
        let cfg = ModelConfig { num_blocks: 2, channels: 6, num_classes: 3, ..Default::default() };
        let model = Model::init(&cfg).unwrap();
        let (h, w) = (10, 12);
        let image = noise_image("s", h, w, 4);
        // shift right by one column, zero-filling the first column
        let mut px = vec![0.0; h * w * 3];
        for r in 0..h {
            for c in 1..w {
                px[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&image.rgb(r, c - 1));
            }
        }
        let shifted = Image::new("s", h, w, px).unwrap();
        let a = model.forward(&image).unwrap();
        let b = model.forward(&shifted).unwrap();
        let band = cfg.receptive_radius();
        for r in band..h - band {
            for c in band..w - 1 - band {
                for (x, y) in a.at(r, c).iter().zip(b.at(r, c + 1)) {
                    assert!((x - y).abs() < 1e-12, "({r}, {c})");
                }
            }
        }
    }

    #[test]
    fn committee_requires_dropout() {
        let cfg = ModelConfig { dropout_rate: 0.0, ..Default::default() };
        let model = Model::init(&cfg).unwrap();
        let image = noise_image("c", 5, 5, 0);
        assert!(matches!(model.predict(&image, 20, 0), Err(ModelError::DegenerateCommittee)));
        let plain = model.predict(&image, 0, 0).unwrap();
        let reference = softmax_normalize(&model.forward(&image).unwrap()).unwrap();
        assert_eq!(plain, reference);
    }

    #[test]
    fn committee_average_is_a_distribution() {
        let cfg = ModelConfig { dropout_rate: 0.3, ..Default::default() };
        let model = Model::init(&cfg).unwrap();
        let image = noise_image("c", 6, 7, 5);
        for passes in [1, 3, DEFAULT_MC_PASSES] {
            let p = model.predict(&image, passes, 9).unwrap();
            for d in p.pixels() {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(model.predict(&image, 4, 1).unwrap(), model.predict(&image, 4, 1).unwrap());
        assert_ne!(model.predict(&image, 4, 1).unwrap(), model.predict(&image, 0, 1).unwrap());
    }
}
