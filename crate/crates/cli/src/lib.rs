//! The `pixelpick` command line.

pub mod args;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pixelpick_core::datasets::{eval_spec, generate_synthetic, load_dataset, save_dataset, Dataset, SyntheticSpec};
use pixelpick_core::engine::{
    mean_std, propose_batch, round_configs, run_active_learning, run_with_oracle, study_depth, study_diversity_ratio,
    study_noise, study_round_batch, train_and_evaluate, write_depth_csv, write_diversity_csv, write_noise_csv,
    write_round_batch_csv, write_rounds_csv, LoopConfig, RoundReport,
};
use pixelpick_core::model::{train_round, Model};
use pixelpick_core::oracle::{HumanLink, HumanOracle, OracleKind};
use pixelpick_core::AnnotationDatabase;
use pixelpick_server::AppState;
use serde::Serialize;

pub use args::Cli;
use args::{Command, DataArgs, GenerateArgs, LoopArgs, OracleArg, ProposeArgs, ServeArgs, SimulateArgs, Study, TrainArgs};

const DEFAULT_ERROR_RATE: f64 = 0.1;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Study { study } => run_study(&study),
        Command::Serve(a) => serve(&a),
        Command::Train(a) => train(&a),
        Command::Propose(a) => propose(&a),
    }
}

impl LoopArgs {
    /// The loop config these flags describe for a dataset with `num_classes`.
    pub fn resolve(&self, num_classes: usize) -> Result<LoopConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => LoopConfig::default(),
        };
        if cfg.model.num_classes != num_classes {
            log::debug!("model classes set to the dataset's {num_classes}");
            cfg.model.num_classes = num_classes;
        }
        set(&mut cfg.rounds, self.rounds);
        set(&mut cfg.acquisition.pixels_per_image, self.pixels_per_image);
        if self.bootstrap_pixels.is_some() {
            cfg.bootstrap_pixels = self.bootstrap_pixels;
        }
        set(&mut cfg.acquisition.strategy, self.strategy);
        cfg.acquisition.committee |= self.committee;
        set(&mut cfg.acquisition.mc_passes, self.mc_passes);
        set(&mut cfg.acquisition.top_percent, self.top_percent);
        set(&mut cfg.acquisition.heuristic, self.heuristic);
        set(&mut cfg.diversity_ratio, self.eta);
        set(&mut cfg.seeds, self.seeds.clone());
        set(&mut cfg.model.num_blocks, self.blocks);
        set(&mut cfg.model.channels, self.channels);
        set(&mut cfg.model.dropout_rate, self.dropout);
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.learning_rate, self.learning_rate);
        set(&mut cfg.train.momentum, self.momentum);
        set(&mut cfg.train.batch_images, self.batch_images);
        if self.no_augment {
            cfg.train.augment = false;
        }
        cfg.oracle = match (self.oracle, cfg.oracle) {
            (Some(OracleArg::Sim), _) if self.error_rate.is_some() => bail!("--error-rate needs --oracle noisy"),
            (Some(OracleArg::Sim), _) => OracleKind::Simulated,
            (Some(OracleArg::Noisy), OracleKind::Noisy { error_rate }) | (None, OracleKind::Noisy { error_rate }) => {
                OracleKind::Noisy { error_rate: self.error_rate.unwrap_or(error_rate) }
            }
            (Some(OracleArg::Noisy), _) => OracleKind::Noisy { error_rate: self.error_rate.unwrap_or(DEFAULT_ERROR_RATE) },
            (None, kind) => kind,
        };
        cfg.validate()?;
        if let Some(path) = &self.save_config {
            std::fs::write(path, serde_json::to_string_pretty(&cfg)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn eval_dir(dataset: &Path) -> PathBuf {
    dataset.join("eval")
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_data(data: &DataArgs) -> Result<(Dataset, Dataset)> {
    let train = load(&data.dataset)?;
    let eval = load(&data.eval.clone().unwrap_or_else(|| eval_dir(&data.dataset)))?;
    Ok((train, eval))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        num_images: a.images,
        height: a.size,
        width: a.size,
        num_classes: a.classes,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    set(&mut spec.noise_std, a.noise_std);
    let train = generate_synthetic(&spec)?;
    let eval = generate_synthetic(&eval_spec(&spec))?;
    save_dataset(&train, &a.out)?;
    save_dataset(&eval, eval_dir(&a.out))?;
    println!("wrote {} training and {} evaluation images to {}", train.len(), eval.len(), a.out.display());
    Ok(())
}

/// Per-round mean and std of mIoU over seeds, for the console.
fn print_summary(reports: &[RoundReport]) {
    let mut by_round: BTreeMap<u32, (usize, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        let entry = by_round.entry(r.round).or_insert((r.labels_per_image, Vec::new()));
        entry.1.push(r.miou);
    }
    println!("round  labels/img  mIoU (mean ± std over seeds)");
    for (round, (labels, mious)) in by_round {
        let (m, s) = mean_std(&mious);
        println!("{round:>5}  {labels:>10}  {m:.4} ± {s:.4}");
    }
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let (train, eval) = load_data(&a.data)?;
    let cfg = a.run.resolve(train.num_classes())?;
    let reports = run_active_learning(&cfg, &train, &eval)?;
    let mut out = create(&a.out)?;
    write_rounds_csv(&mut out, &reports, cfg.model.num_classes, a.wall_clock)?;
    out.flush()?;
    print_summary(&reports);
    Ok(())
}

fn run_study(study: &Study) -> Result<()> {
    match study {
        Study::DiversityRatio { data, run, etas, total_budget, out } => {
            let (train, eval) = load_data(data)?;
            let cfg = run.resolve(train.num_classes())?;
            let budget = total_budget.unwrap_or(cfg.pixels_per_image() * train.len());
            let rows = study_diversity_ratio(&cfg, &train, &eval, etas, budget)?;
            write_diversity_csv(create(out)?, &rows)?;
            for r in &rows {
                println!("eta {:<6} images {:>4}  mIoU {:.4} ± {:.4}", r.eta, r.images, r.mean_miou, r.std_miou);
            }
        }
        Study::RoundBatch { data, run, ns, budget_per_image, out, wall_clock } => {
            let (train, eval) = load_data(data)?;
            let cfg = run.resolve(train.num_classes())?;
            let results = study_round_batch(&cfg, &train, &eval, ns, *budget_per_image)?;
            write_round_batch_csv(create(out)?, &results, *wall_clock)?;
            for r in &results {
                let (m, s) = mean_std(&r.final_mious);
                println!(
                    "n {:>3}  rounds {:>3}  final mIoU {m:.4} ± {s:.4}  training {:.1}s  label visits {}",
                    r.pixels_per_round, r.rounds, r.total_seconds, r.total_label_visits
                );
            }
        }
        Study::Noise { data, run, out } => {
            let (train, eval) = load_data(data)?;
            let cfg = run.resolve(train.num_classes())?;
            let rate = match cfg.oracle {
                OracleKind::Noisy { error_rate } => error_rate,
                _ => run.error_rate.unwrap_or(DEFAULT_ERROR_RATE),
            };
            let study = study_noise(&cfg, &train, &eval, rate)?;
            write_noise_csv(create(out)?, &study)?;
            for r in &study.rows {
                println!(
                    "round {:>3}  clean {:.4} ± {:.4}  noisy {:.4} ± {:.4}",
                    r.round, r.clean_mean, r.clean_std, r.noisy_mean, r.noisy_std
                );
            }
            println!("relative final-round drop: {:.2}%", 100.0 * study.relative_drop);
        }
        Study::Depth { data, run, depths, out } => {
            let (train, eval) = load_data(data)?;
            let cfg = run.resolve(train.num_classes())?;
            let curves = study_depth(&cfg, &train, &eval, depths)?;
            write_depth_csv(create(out)?, &curves)?;
            for c in &curves {
                if let Some(last) = c.curve.last() {
                    println!("blocks {:>2}  final mIoU {:.4} ± {:.4}", c.num_blocks, last.mean_miou, last.std_miou);
                }
            }
        }
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let train = load(&a.data.dataset)?;
    let state = AppState::open(train.clone(), &a.session_out)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad --host/--port")?;
    let runtime = tokio::runtime::Runtime::new()?;

    let mut engine = None;
    let link = HumanLink::new();
    if a.drive {
        if !state.labels().is_empty() {
            bail!("--drive starts a fresh loop; {} already holds labels", a.session_out.display());
        }
        let eval = load(&a.data.eval.clone().unwrap_or_else(|| eval_dir(&a.data.dataset)))?;
        let cfg = a.run.resolve(train.num_classes())?;
        let seed = cfg.seeds[0];
        let report = a.report.clone();
        let engine_link = link.clone();
        engine = Some(std::thread::spawn(move || -> Result<()> {
            let mut oracle = HumanOracle::new(engine_link.clone());
            let result = run_with_oracle(&cfg, &train, &eval, seed, &mut oracle);
            engine_link.close();
            let reports = result?;
            print_summary(&reports);
            if let Some(path) = report {
                let mut out = create(&path)?;
                write_rounds_csv(&mut out, &reports, cfg.model.num_classes, true)?;
                out.flush()?;
            }
            log::info!("loop finished; the server keeps running until Ctrl-C");
            Ok(())
        }));
    }

    runtime.block_on(async {
        if a.drive {
            pixelpick_server::spawn_link_watcher(state.clone(), link.clone());
        }
        pixelpick_server::serve(state, addr).await
    })?;
    link.close();
    if let Some(handle) = engine {
        match handle.join() {
            Ok(r) => r?,
            Err(_) => bail!("the loop thread panicked"),
        }
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let (train, eval) = load_data(&a.data)?;
    let cfg = a.run.resolve(train.num_classes())?;
    let db = AnnotationDatabase::load(&a.labels, train.num_classes())?;
    if db.is_empty() {
        bail!("{} holds no labels", a.labels.display());
    }
    let (model, result, loss) = train_and_evaluate(&cfg, &train, &eval, &db, cfg.seeds[0])?;
    println!("labels {}  final loss {loss:.4}  mIoU {:.4}", db.len(), result.miou);
    for (c, iou) in result.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("  {:<16} {v:.4}", train.class_names[c]),
            None => println!("  {:<16} -", train.class_names[c]),
        }
    }
    if let Some(path) = &a.checkpoint_out {
        model.save(path)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ProposalCoord<'a> {
    image: &'a str,
    row: usize,
    col: usize,
}

#[derive(Serialize)]
struct ProposalFile<'a> {
    round: u32,
    proposals: Vec<ProposalCoord<'a>>,
}

fn propose(a: &ProposeArgs) -> Result<()> {
    let train = load(&a.dataset)?;
    let cfg = a.run.resolve(train.num_classes())?;
    let db = AnnotationDatabase::load(&a.labels, train.num_classes())?;
    let round = a.round.unwrap_or_else(|| db.entries().last().map_or(0, |e| e.round + 1));
    let seed = cfg.seeds[0];
    let model = match &a.checkpoint {
        Some(path) => Model::load(path)?,
        None => {
            if db.is_empty() {
                bail!("{} holds no labels to train on", a.labels.display());
            }
            let (mcfg, tcfg) = round_configs(&cfg, seed, round);
            train_round(&mcfg, &tcfg, &train.images, &db)?.model
        }
    };
    let picks = propose_batch(&cfg, &model, &train, &db, seed, round)?;
    let file = ProposalFile {
        round,
        proposals: picks.iter().map(|p| ProposalCoord { image: &p.image_id, row: p.row, col: p.col }).collect(),
    };
    let mut out = create(&a.out)?;
    serde_json::to_writer_pretty(&mut out, &file)?;
    writeln!(out)?;
    out.flush()?;
    println!("{} proposals for round {round} written to {}", picks.len(), a.out.display());
    Ok(())
}
