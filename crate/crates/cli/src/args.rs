use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pixelpick_core::acquisition::{Heuristic, Strategy};

#[derive(Debug, Parser)]
#[command(name = "pixelpick", version, about = "Pixel-level active learning for semantic segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset, with its evaluation split under DIR/eval.
    Generate(GenerateArgs),
    /// Run the active-learning loop against a simulated oracle.
    Simulate(SimulateArgs),
    /// Run one of the ablation studies.
    Study {
        #[command(subcommand)]
        study: Study,
    },
    /// Serve the annotation API.
    Serve(ServeArgs),
    /// Train one model on a label file and evaluate it.
    Train(TrainArgs),
    /// Train on a label file and write the next batch of proposals.
    Propose(ProposeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub images: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Evaluation split; defaults to DATASET/eval.
    #[arg(long)]
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    Sim,
    Noisy,
}

/// Loop settings. Unset flags fall back to `--config`, then to the defaults.
#[derive(Debug, Args, Default)]
pub struct LoopArgs {
    /// JSON loop config used as the base for every other flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the resolved loop config as JSON.
    #[arg(long)]
    pub save_config: Option<PathBuf>,
    /// Rounds including the random bootstrap round 0.
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub pixels_per_image: Option<usize>,
    /// Random labels per image in round 0; defaults to --pixels-per-image
    /// (1 in the round-batch study).
    #[arg(long)]
    pub bootstrap_pixels: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Score with an MC-dropout committee.
    #[arg(long)]
    pub committee: bool,
    #[arg(long)]
    pub mc_passes: Option<usize>,
    #[arg(long)]
    pub top_percent: Option<f64>,
    #[arg(long, value_parser = parse_heuristic)]
    pub heuristic: Option<Heuristic>,
    #[arg(long, value_enum)]
    pub oracle: Option<OracleArg>,
    #[arg(long)]
    pub error_rate: Option<f64>,
    /// Fraction of training images that receive labels.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_images: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

fn parse_heuristic(s: &str) -> Result<Heuristic, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: LoopArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Record measured seconds in the CSV; off keeps reruns byte-identical.
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Debug, Subcommand)]
pub enum Study {
    /// Single-round training at each diversity ratio, fixed total budget.
    DiversityRatio {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: LoopArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,0.25,0.5,1.0")]
        etas: Vec<f64>,
        /// Total labelled pixels; defaults to pixels-per-image times the training set size.
        #[arg(long)]
        total_budget: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// The same per-image budget reached with different batch sizes, after a
    /// shared random bootstrap.
    RoundBatch {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: LoopArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
        ns: Vec<usize>,
        /// Pixels per image acquired after the bootstrap round.
        #[arg(long, default_value_t = 20)]
        budget_per_image: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        wall_clock: bool,
    },
    /// Clean against noisy labels; the rate comes from --error-rate (default 0.1).
    Noise {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: LoopArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// The loop at several model depths.
    Depth {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: LoopArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        depths: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Append-only label file; sessions and timings live next to it.
    #[arg(long)]
    pub session_out: PathBuf,
    /// Run the loop with the annotator as its oracle; each round's batch
    /// shows up as a session.
    #[arg(long)]
    pub drive: bool,
    /// Per-round CSV of the driven loop.
    #[arg(long, requires = "drive")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub run: LoopArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON Lines label file.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    #[command(flatten)]
    pub run: LoopArgs,
}

#[derive(Debug, Args)]
pub struct ProposeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Score with this model instead of training one on the labels.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Round of the proposed batch; defaults to one past the latest label.
    #[arg(long)]
    pub round: Option<u32>,
    /// Session request JSON, ready for POST /sessions.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: LoopArgs,
}
