//! `geomoe`: synthetic data, pretraining, embeddings, probes and expert
//! analysis from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "geomoe", version, about = "Metadata-aware mixture-of-experts masked autoencoder for multispectral chips")]
struct Cli {
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic chip archive.
    GenData(GenDataArgs),
    /// Pretrain the masked autoencoder and write a checkpoint plus metrics CSV.
    Pretrain(PretrainArgs),
    /// Extract frozen-encoder embeddings for every chip of an archive.
    Embed(EmbedArgs),
    /// Fit and score a linear probe on frozen-encoder embeddings.
    Probe(ProbeArgs),
    /// Expert contribution and ablation maps for one chip, plus routing histogram.
    Analyze(AnalyzeArgs),
    /// Per-layer expert sparsity census.
    Sparsity(SparsityArgs),
    /// Reconstruct one chip without masking and with random masking.
    Reconstruct(ReconstructArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LabelModeArg {
    None,
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Cls,
    All,
    Avg,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AblationArg {
    Renormalize,
    Reroute,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    #[arg(long, default_value_t = 40)]
    pub height: usize,
    #[arg(long, default_value_t = 40)]
    pub width: usize,
    #[arg(long, default_value_t = 7)]
    pub bands: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, value_enum, default_value = "single")]
    pub label_mode: LabelModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Omit geo-temporal metadata.
    #[arg(long)]
    pub no_metadata: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Chip archive to train on.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with optional `profile`, `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture preset: tiny, small or default.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Decay norms, biases, position tables and learned tokens too.
    #[arg(long)]
    pub decay_all: bool,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV (default: `<out>.metrics.csv`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "cls")]
    pub mode: ModeArg,
    /// `.csv` for text, anything else for raw f32 with a JSON sidecar.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled archive; split into train and test unless `--test-data` is given.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cls")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inverse L2 regularisation strength.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: u64,
    /// Fit on raw instead of z-scored features.
    #[arg(long)]
    pub no_standardize: bool,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional metric table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Chip index within the archive.
    #[arg(long, default_value_t = 0)]
    pub chip: usize,
    /// Encoder layer.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, value_enum, default_value = "renormalize")]
    pub ablation: AblationArg,
    /// Also write PPM overlays and per-expert heat maps.
    #[arg(long)]
    pub ppm: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct SparsityArgs {
    /// Read the architecture from a checkpoint.
    #[arg(long, conflicts_with = "profile")]
    pub checkpoint: Option<PathBuf>,
    /// Architecture preset when no checkpoint is given.
    #[arg(long, default_value = "default")]
    pub profile: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub chip: usize,
    /// Masking ratio for the masked reconstruction.
    #[arg(long, default_value_t = 0.75)]
    pub mask: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.into()).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Embed(a) => commands::embed(a),
        Command::Probe(a) => commands::probe(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Sparsity(a) => commands::sparsity(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
