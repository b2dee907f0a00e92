//! The active-learning loop, evaluation and the ablation studies.

mod budget;
mod metrics;
mod report;
mod studies;

pub use budget::{choose_images, distribute_budget, images_for_ratio};
pub use metrics::{compute_miou, Confusion, MiouResult};
pub use report::{
    format_float, write_depth_csv, write_diversity_csv, write_noise_csv, write_round_batch_csv, write_rounds_csv,
};
pub use studies::{
    mean_std, study_depth, study_diversity_ratio, study_noise, study_round_batch, CurvePoint, DepthCurve,
    DiversityRow, NoiseRow, NoiseStudy, RoundBatchResult,
};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{
    class_diversity, score, select_random_in_image, select_variant_a, select_variant_b, AcquisitionConfig,
    AcquisitionError, Exclusion, Heuristic, Strategy,
};
use crate::datasets::{Dataset, DatasetError};
use crate::domain::{AnnotationDatabase, ClassId, DomainError, GroundTruthMask, Image, PixelRef, IGNORE};
use crate::model::{train_round, Model, ModelConfig, ModelError, TrainConfig};
use crate::oracle::{Oracle, OracleError, OracleKind, SimulatedOracle};
use crate::seed::Stream;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `pixels_per_image` is the per-round, per-image budget.
    pub acquisition: AcquisitionConfig,
    pub oracle: OracleKind,
    /// Rounds including the random bootstrap round 0.
    pub rounds: usize,
    /// Random labels per image in round 0; `None` uses the per-round budget.
    #[serde(default)]
    pub bootstrap_pixels: Option<usize>,
    /// Fraction of training images that receive labels.
    pub diversity_ratio: f64,
    /// One repeat per seed.
    pub seeds: Vec<u64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            acquisition: AcquisitionConfig::default(),
            oracle: OracleKind::Simulated,
            rounds: 5,
            bootstrap_pixels: None,
            diversity_ratio: 1.0,
            seeds: vec![0],
        }
    }
}

impl LoopConfig {
    pub fn pixels_per_image(&self) -> usize {
        self.acquisition.pixels_per_image
    }

    pub fn bootstrap_per_image(&self) -> usize {
        self.bootstrap_pixels.unwrap_or(self.acquisition.pixels_per_image)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.model.validate()?;
        self.train.validate()?;
        self.acquisition.validate()?;
        if self.rounds == 0 {
            return Err(EngineError::Config("rounds must be at least 1".into()));
        }
        if self.bootstrap_pixels == Some(0) {
            return Err(EngineError::Config("bootstrap_pixels must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(EngineError::Config("at least one seed is required".into()));
        }
        if !(self.diversity_ratio > 0.0 && self.diversity_ratio <= 1.0) {
            return Err(EngineError::Config(format!("diversity ratio {} not in (0, 1]", self.diversity_ratio)));
        }
        if let OracleKind::Noisy { error_rate } = self.oracle {
            if !(0.0..=1.0).contains(&error_rate) {
                return Err(EngineError::Config(format!("error rate {error_rate} not in [0, 1]")));
            }
        }
        if self.acquisition.committee && self.acquisition.strategy != Strategy::Random && self.model.dropout_rate == 0.0 {
            return Err(EngineError::Config("an MC-dropout committee needs dropout_rate > 0".into()));
        }
        Ok(())
    }

    fn check_data(&self, train: &Dataset, eval: &Dataset) -> Result<(), EngineError> {
        train.validate()?;
        eval.validate()?;
        let c = self.model.num_classes;
        if train.num_classes() != c || eval.num_classes() != c {
            return Err(EngineError::Config(format!(
                "model has {c} classes, datasets have {} and {}",
                train.num_classes(),
                eval.num_classes()
            )));
        }
        if train.is_empty() || eval.is_empty() {
            return Err(EngineError::Config("training and evaluation sets must be non-empty".into()));
        }
        Ok(())
    }
}

/// Outcome of one round for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub seed: u64,
    /// Cumulative labels on each participating image.
    pub labels_per_image: usize,
    pub labelled_pixels: usize,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub train_loss: f64,
    /// Wall-clock time of the whole round.
    pub seconds: f64,
    /// Deterministic training cost: epochs times labelled pixels.
    pub label_visits: u64,
    /// Mean distinct ground-truth classes among this round's queries.
    pub class_diversity: Option<f64>,
}

fn acquire_seed(seed: u64, image_id: &str, round: u32) -> u64 {
    Stream::new(seed, "acquire").str(image_id).u64(u64::from(round)).seed()
}

/// Pixels that may not be queried: IGNORE pixels and existing labels.
fn exclusion(mask: &GroundTruthMask, db: &AnnotationDatabase) -> Exclusion {
    let mut ex = Exclusion::from_mask(mask.height(), mask.width(), mask.classes().iter().map(|&c| c == IGNORE).collect());
    for lp in db.labels_for(mask.image_id()) {
        ex.insert(lp.pixel.row, lp.pixel.col);
    }
    ex
}

/// Random labels per image with their own per-image streams.
fn random_queries(
    data: &Dataset,
    allocation: &[(usize, usize)],
    db: &AnnotationDatabase,
    seed: u64,
    round: u32,
) -> Result<Vec<PixelRef>, AcquisitionError> {
    let mut out = Vec::new();
    for &(i, n) in allocation {
        let mask = &data.masks[i];
        let ex = exclusion(mask, db);
        let id = mask.image_id();
        out.extend(select_random_in_image(id, mask.height(), mask.width(), n, &ex, acquire_seed(seed, id, round))?);
    }
    Ok(out)
}

/// Scores and selects the next batch on every participating image.
fn acquire(
    cfg: &AcquisitionConfig,
    model: &Model,
    data: &Dataset,
    chosen: &[usize],
    db: &AnnotationDatabase,
    seed: u64,
    round: u32,
) -> Result<Vec<PixelRef>, EngineError> {
    let n = cfg.pixels_per_image;
    let per_image: Vec<Result<Vec<PixelRef>, EngineError>> = chosen
        .par_iter()
        .map(|&i| {
            let (image, mask) = (&data.images[i], &data.masks[i]);
            let ex = exclusion(mask, db);
            let pick_seed = acquire_seed(seed, image.id(), round);
            if cfg.strategy == Strategy::Random {
                return Ok(select_random_in_image(image.id(), image.height(), image.width(), n, &ex, pick_seed)?);
            }
            let passes = if cfg.committee { cfg.mc_passes } else { 0 };
            let mc_seed = Stream::new(seed, "mc-committee").str(image.id()).u64(u64::from(round)).seed();
            let probs = model.predict(image, passes, mc_seed)?;
            let umap = score(cfg.strategy, &probs).expect("non-random strategy has a score");
            Ok(match cfg.heuristic {
                Heuristic::VariantB => select_variant_b(&umap, n, cfg.top_percent, &ex, pick_seed)?,
                Heuristic::VariantA => select_variant_a(&umap, n, cfg.top_percent, &ex, pick_seed)?,
            })
        })
        .collect();
    let mut out = Vec::with_capacity(chosen.len() * n);
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}

/// Argmax predictions on `images`.
pub fn predict_masks(model: &Model, images: &[Image]) -> Result<Vec<Vec<ClassId>>, EngineError> {
    images.par_iter().map(|im| Ok(model.predict(im, 0, 0)?.argmax())).collect()
}

pub fn evaluate(model: &Model, eval: &Dataset) -> Result<MiouResult, EngineError> {
    compute_miou(&predict_masks(model, &eval.images)?, &eval.masks, eval.num_classes())
}

/// Model and training settings for `round` of a repeat, with derived seeds.
pub fn round_configs(cfg: &LoopConfig, seed: u64, round: u32) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig { seed: Stream::new(seed, "model-init").u64(u64::from(round)).seed(), ..cfg.model.clone() };
    let train = TrainConfig { seed: Stream::new(seed, "train").u64(u64::from(round)).seed(), ..cfg.train.clone() };
    (model, train)
}

fn is_exhaustion(e: &EngineError) -> bool {
    matches!(e, EngineError::Acquisition(AcquisitionError::Shortfall { .. }))
}

/// Runs one repeat of the loop with a caller-supplied oracle.
///
/// Round 0 labels random pixels; every later round labels the batch the
/// previous round's model selected. Each round trains a fresh model on the
/// whole database and evaluates it on `eval`. Running out of candidates
/// ends the run early with the reports gathered so far.
pub fn run_with_oracle(
    cfg: &LoopConfig,
    train: &Dataset,
    eval: &Dataset,
    seed: u64,
    oracle: &mut dyn Oracle,
) -> Result<Vec<RoundReport>, EngineError> {
    cfg.validate()?;
    cfg.check_data(train, eval)?;
    let mut chosen = choose_images(train.len(), cfg.diversity_ratio, seed)?;
    chosen.sort_unstable();
    let mut db = AnnotationDatabase::new(cfg.model.num_classes);
    let mut reports = Vec::with_capacity(cfg.rounds);

    let b = cfg.bootstrap_per_image();
    let bootstrap: Vec<(usize, usize)> = chosen.iter().map(|&i| (i, b)).collect();
    let mut queries = match random_queries(train, &bootstrap, &db, seed, 0) {
        Ok(q) => q,
        Err(e @ AcquisitionError::Shortfall { .. }) => {
            log::warn!("seed {seed}: no room for the bootstrap round: {e}");
            return Ok(reports);
        }
        Err(e) => return Err(e.into()),
    };

    for round in 0..cfg.rounds as u32 {
        let start = Instant::now();
        let labels = oracle.label(&queries, round)?;
        db.extend(labels)?;
        let (mcfg, tcfg) = round_configs(cfg, seed, round);
        let trained = train_round(&mcfg, &tcfg, &train.images, &db)?;
        let result = evaluate(&trained.model, eval)?;
        let diversity = class_diversity(&queries, &train.masks)?;

        let mut exhausted = None;
        if (round as usize) + 1 < cfg.rounds {
            match acquire(&cfg.acquisition, &trained.model, train, &chosen, &db, seed, round + 1) {
                Ok(next) => queries = next,
                Err(e) if is_exhaustion(&e) => exhausted = Some(e),
                Err(e) => return Err(e),
            }
        }
        reports.push(RoundReport {
            round,
            seed,
            labels_per_image: db.len() / chosen.len(),
            labelled_pixels: db.len(),
            miou: result.miou,
            per_class_iou: result.per_class_iou,
            train_loss: trained.final_loss(),
            seconds: start.elapsed().as_secs_f64(),
            label_visits: (cfg.train.epochs * db.len()) as u64,
            class_diversity: Some(diversity),
        });
        log::info!("seed {seed} round {round}: {} labels, mIoU {:.4}", db.len(), result.miou);
        if let Some(e) = exhausted {
            log::warn!("seed {seed}: stopping after round {round}: {e}");
            break;
        }
    }
    Ok(reports)
}

/// Simulated oracle for one repeat, per the config.
pub(crate) fn simulated_oracle<'a>(kind: OracleKind, train: &'a Dataset, seed: u64) -> Result<SimulatedOracle<'a>, EngineError> {
    match kind {
        OracleKind::Simulated => Ok(SimulatedOracle::exact(&train.masks)),
        OracleKind::Noisy { error_rate } => {
            Ok(SimulatedOracle::noisy(&train.masks, error_rate, Stream::new(seed, "oracle-noise").seed())?)
        }
        OracleKind::Human => Err(EngineError::Config("the human oracle needs a live session; use run_with_oracle".into())),
    }
}

/// Runs every seed of the config against a simulated oracle and returns
/// the reports of all repeats, seed by seed.
pub fn run_active_learning(cfg: &LoopConfig, train: &Dataset, eval: &Dataset) -> Result<Vec<RoundReport>, EngineError> {
    cfg.validate()?;
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let mut oracle = simulated_oracle(cfg.oracle, train, seed)?;
        all.extend(run_with_oracle(cfg, train, eval, seed, &mut oracle)?);
    }
    Ok(all)
}

/// The batch `model` would query next on the images a repeat with `seed`
/// labels, skipping pixels already in `db`.
pub fn propose_batch(
    cfg: &LoopConfig,
    model: &Model,
    train: &Dataset,
    db: &AnnotationDatabase,
    seed: u64,
    round: u32,
) -> Result<Vec<PixelRef>, EngineError> {
    cfg.validate()?;
    train.validate()?;
    let mut chosen = choose_images(train.len(), cfg.diversity_ratio, seed)?;
    chosen.sort_unstable();
    acquire(&cfg.acquisition, model, train, &chosen, db, seed, round)
}

/// Trains one model on an existing database and evaluates it.
pub fn train_and_evaluate(
    cfg: &LoopConfig,
    train: &Dataset,
    eval: &Dataset,
    db: &AnnotationDatabase,
    seed: u64,
) -> Result<(Model, MiouResult, f64), EngineError> {
    cfg.validate()?;
    cfg.check_data(train, eval)?;
    let (mcfg, tcfg) = round_configs(cfg, seed, 0);
    let trained = train_round(&mcfg, &tcfg, &train.images, db)?;
    let result = evaluate(&trained.model, eval)?;
    let loss = trained.final_loss();
    Ok((trained.model, result, loss))
}
