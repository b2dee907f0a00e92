use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    distribute_budget, evaluate, random_queries, round_configs, run_active_learning, simulated_oracle, EngineError,
    LoopConfig, RoundReport,
};
use crate::datasets::Dataset;
use crate::domain::AnnotationDatabase;
use crate::model::train_round;
use crate::oracle::{Oracle, OracleKind};
use crate::seed::Stream;

/// Mean and sample standard deviation; the deviation is 0 for fewer than
/// two values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-round aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: u32,
    pub labels_per_image: usize,
    pub mean_miou: f64,
    pub std_miou: f64,
    /// Seeds that reached this round.
    pub repeats: usize,
    /// Wall-clock seconds summed over seeds, up to and including this round.
    pub cumulative_seconds: f64,
    pub cumulative_label_visits: u64,
}

fn curve(reports: &[RoundReport]) -> Vec<CurvePoint> {
    let mut by_round: BTreeMap<u32, Vec<&RoundReport>> = BTreeMap::new();
    for r in reports {
        by_round.entry(r.round).or_default().push(r);
    }
    let (mut secs, mut visits) = (0.0, 0u64);
    by_round
        .into_iter()
        .map(|(round, rs)| {
            let mious: Vec<f64> = rs.iter().map(|r| r.miou).collect();
            let (mean_miou, std_miou) = mean_std(&mious);
            secs += rs.iter().map(|r| r.seconds).sum::<f64>();
            visits += rs.iter().map(|r| r.label_visits).sum::<u64>();
            CurvePoint {
                round,
                labels_per_image: rs[0].labels_per_image,
                mean_miou,
                std_miou,
                repeats: rs.len(),
                cumulative_seconds: secs,
                cumulative_label_visits: visits,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub eta: f64,
    pub images: usize,
    pub mean_miou: f64,
    pub std_miou: f64,
    pub mious: Vec<f64>,
}

/// Single-round training at each diversity ratio with a fixed total budget
/// of randomly placed labels, repeated over the config's seeds. Rows come
/// out sorted by ratio.
pub fn study_diversity_ratio(
    cfg: &LoopConfig,
    train: &Dataset,
    eval: &Dataset,
    etas: &[f64],
    total_budget: usize,
) -> Result<Vec<DiversityRow>, EngineError> {
    cfg.validate()?;
    cfg.check_data(train, eval)?;
    let mut etas = etas.to_vec();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    let mut rows = Vec::with_capacity(etas.len());
    for eta in etas {
        let mut mious = Vec::with_capacity(cfg.seeds.len());
        let mut images = 0;
        for &seed in &cfg.seeds {
            let run_seed = Stream::new(seed, "diversity").u64(eta.to_bits()).seed();
            let allocation = distribute_budget(total_budget, train.len(), eta, run_seed)?;
            images = allocation.len();
            let mut db = AnnotationDatabase::new(cfg.model.num_classes);
            let queries = random_queries(train, &allocation, &db, run_seed, 0)?;
            let mut oracle = simulated_oracle(cfg.oracle, train, seed)?;
            db.extend(oracle.label(&queries, 0)?)?;
            let (mcfg, tcfg) = round_configs(cfg, run_seed, 0);
            let trained = train_round(&mcfg, &tcfg, &train.images, &db)?;
            let miou = evaluate(&trained.model, eval)?.miou;
            log::info!("eta {eta}: seed {seed} mIoU {miou:.4}");
            mious.push(miou);
        }
        let (mean_miou, std_miou) = mean_std(&mious);
        rows.push(DiversityRow { eta, images, mean_miou, std_miou, mious });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundBatchResult {
    pub pixels_per_round: usize,
    pub rounds: usize,
    pub curve: Vec<CurvePoint>,
    /// Final-round mIoU of every seed.
    pub final_mious: Vec<f64>,
    pub total_seconds: f64,
    pub total_label_visits: u64,
}

/// Reaches the same per-image budget with different per-round batch sizes.
/// Every run starts from `cfg.bootstrap_pixels` random labels per image
/// (1 when unset), then acquires `n` per image per round until
/// `budget_per_image` more have been added: `1 + budget_per_image / n`
/// rounds in all.
pub fn study_round_batch(
    cfg: &LoopConfig,
    train: &Dataset,
    eval: &Dataset,
    ns: &[usize],
    budget_per_image: usize,
) -> Result<Vec<RoundBatchResult>, EngineError> {
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        if n == 0 || budget_per_image % n != 0 {
            return Err(EngineError::Config(format!("budget {budget_per_image} is not a multiple of batch size {n}")));
        }
        let mut run = cfg.clone();
        run.rounds = 1 + budget_per_image / n;
        run.bootstrap_pixels = Some(cfg.bootstrap_pixels.unwrap_or(1));
        run.acquisition.pixels_per_image = n;
        let reports = run_active_learning(&run, train, eval)?;
        let curve = curve(&reports);
        let last = curve.last().map_or(0, |p| p.round);
        let final_mious = reports.iter().filter(|r| r.round == last).map(|r| r.miou).collect();
        out.push(RoundBatchResult {
            pixels_per_round: n,
            rounds: run.rounds,
            total_seconds: reports.iter().map(|r| r.seconds).sum(),
            total_label_visits: reports.iter().map(|r| r.label_visits).sum(),
            curve,
            final_mious,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub round: u32,
    pub labels_per_image: usize,
    pub clean_mean: f64,
    pub clean_std: f64,
    pub noisy_mean: f64,
    pub noisy_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStudy {
    pub error_rate: f64,
    pub rows: Vec<NoiseRow>,
    /// `1 - noisy / clean` at the final round.
    pub relative_drop: f64,
}

/// The same loop twice with shared seeds: once with exact labels, once
/// with labels corrupted at `error_rate`.
pub fn study_noise(cfg: &LoopConfig, train: &Dataset, eval: &Dataset, error_rate: f64) -> Result<NoiseStudy, EngineError> {
    let clean_cfg = LoopConfig { oracle: OracleKind::Simulated, ..cfg.clone() };
    let noisy_cfg = LoopConfig { oracle: OracleKind::Noisy { error_rate }, ..cfg.clone() };
    let clean = curve(&run_active_learning(&clean_cfg, train, eval)?);
    let noisy = curve(&run_active_learning(&noisy_cfg, train, eval)?);
    let rows: Vec<NoiseRow> = clean
        .iter()
        .zip(&noisy)
        .map(|(c, n)| NoiseRow {
            round: c.round,
            labels_per_image: c.labels_per_image,
            clean_mean: c.mean_miou,
            clean_std: c.std_miou,
            noisy_mean: n.mean_miou,
            noisy_std: n.std_miou,
        })
        .collect();
    let relative_drop = rows.last().map_or(f64::NAN, |r| 1.0 - r.noisy_mean / r.clean_mean);
    Ok(NoiseStudy { error_rate, rows, relative_drop })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthCurve {
    pub num_blocks: usize,
    pub curve: Vec<CurvePoint>,
}

/// The loop repeated for each model depth.
pub fn study_depth(cfg: &LoopConfig, train: &Dataset, eval: &Dataset, depths: &[usize]) -> Result<Vec<DepthCurve>, EngineError> {
    depths
        .iter()
        .map(|&num_blocks| {
            let mut run = cfg.clone();
            run.model.num_blocks = num_blocks;
            Ok(DepthCurve { num_blocks, curve: curve(&run_active_learning(&run, train, eval)?) })
        })
        .collect()
}
