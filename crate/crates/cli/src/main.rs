//! `loopweaver`: build a corpus, train the base models, run the rating
//! service, simulate rater populations and manage fine-tuned versions.

mod commands;
mod config;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "loopweaver", version, about = "Rating-driven spectrogram diffusion")]
pub struct Cli {
    /// Data directory holding the manifest, songs, checkpoints and ratings.
    #[arg(long, global = true, env = "LOOPWEAVER_DATA_DIR", default_value = "loopweaver-data")]
    pub data_dir: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Noising strength for generation, in (0, 1].
    #[arg(long, global = true)]
    pub strength: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a genre-stratified corpus into the data directory.
    Corpus(CorpusArgs),
    /// Train the base denoiser (version v0) on the corpus.
    TrainBase(EpochArgs),
    /// Train the VQ similarity model and embed every stored song.
    TrainVq(EpochArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Run simulated rater experiments and write their reports.
    Simulate(SimulateArgs),
    /// Fine-tune the head version on its top-K targets.
    Retrain(RetrainArgs),
    /// Print per-version rating metrics.
    Report(ReportArgs),
    /// Drop stale and near-duplicate training targets.
    Purge,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Number of songs.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub genres: Option<u32>,
    /// Spectrogram grid size.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EpochArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub bind: Option<String>,
    /// Directory served under /ui.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of consecutive seeds to run.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Fraction of adversarial raters.
    #[arg(long)]
    pub adversarial: Option<f64>,
    /// Population size.
    #[arg(long)]
    pub raters: Option<usize>,
    /// Report directory, relative to the data directory unless absolute.
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrainArgs {
    /// Targets to select from the head version.
    #[arg(long, short = 'k')]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
