//! Command-line front end: argument definitions and subcommand implementations.

pub mod commands;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "lbm", version, about = "Latent bridge audio super-resolution")]
pub struct Cli {
    /// Worker threads for batch commands (defaults to all cores).
    #[arg(long, global = true, env = "LBM_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the waveform codec and fit its latent scale.
    TrainCodec(TrainCodecArgs),
    /// Train a stage's bridge predictor against a frozen codec.
    TrainBridge(TrainBridgeArgs),
    /// Super-resolve WAV files through a chain of stages.
    Upsample(UpsampleArgs),
    /// Compare estimates against references (LSD, band LSD, spectral SSIM).
    Eval(EvalArgs),
    /// Build a low-resolution corpus with randomly drawn low-pass filters.
    Degrade(DegradeArgs),
    /// Print the detected effective bandwidth of WAV files.
    DetectBw(DetectBwArgs),
    /// Grid-search a cascaded stage's prior augmentation.
    TuneAug(TuneAugArgs),
    /// Write the synthetic full-band toy corpus.
    ToyCorpus(ToyCorpusArgs),
}

#[derive(Args, Debug)]
pub struct TrainCodecArgs {
    /// Codec run config (TOML with [model] and [training]).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of training WAVs at the codec rate.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's training seed (also seeds initialisation).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Loss CSV path (defaults to `<out>.loss.csv`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainBridgeArgs {
    /// Stage config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of full-band training WAVs at the stage rate.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint (defaults to the config's predictor path).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct UpsampleArgs {
    /// Input WAV, or a directory of WAVs.
    #[arg(long)]
    pub input: PathBuf,
    /// Output WAV, or a directory when the input is one.
    #[arg(long)]
    pub output: PathBuf,
    /// Stage configs in chain order.
    #[arg(long = "stage", required = true)]
    pub stages: Vec<PathBuf>,
    /// Sampling steps per stage.
    #[arg(long, default_value_t = lbm::bridge::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace the final output's low band with the input's.
    #[arg(long)]
    pub post_replace: bool,
    /// Window-averaged sampling with windows of this many seconds.
    #[arg(long, value_name = "SECONDS")]
    pub stitch: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of reference WAVs.
    #[arg(long)]
    pub reference: PathBuf,
    /// Directory of estimates with matching file names.
    #[arg(long)]
    pub estimate: PathBuf,
    /// Output CSV: file,lsd,lsd_lf,lsd_hf,ssim plus a final `mean` row.
    #[arg(long)]
    pub out: PathBuf,
    /// Boundary between the low and high bands, Hz.
    #[arg(long, conflicts_with = "input")]
    pub band_split: Option<f64>,
    /// Directory of the low-resolution inputs; each file's split is its detected bandwidth.
    #[arg(long, required_unless_present = "band_split")]
    pub input: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Degradation policy (TOML: cutoff_range_hz, families, order_range).
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct DetectBwArgs {
    /// WAV file or directory.
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct TuneAugArgs {
    /// Cascaded stage config.
    #[arg(long)]
    pub stage: PathBuf,
    /// Directory of stage inputs (previous-stage outputs or real recordings).
    #[arg(long)]
    pub inputs: PathBuf,
    /// Directory of ground-truth WAVs at the stage rate, matched by name.
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.3, 0.5])]
    pub b_r: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 2000.0, 4000.0])]
    pub margins: Vec<f64>,
    #[arg(long, default_value_t = lbm::bridge::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid CSV: b_r,margin_hz,mean_lsd.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ToyCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 1.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 8000)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs a parsed command line.
pub fn execute(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not configure {n} threads: {e}");
        }
    }
    match cli.command {
        Command::TrainCodec(a) => commands::train_codec(a),
        Command::TrainBridge(a) => commands::train_bridge(a),
        Command::Upsample(a) => commands::upsample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Degrade(a) => commands::degrade(a),
        Command::DetectBw(a) => commands::detect_bw(a),
        Command::TuneAug(a) => commands::tune_aug(a),
        Command::ToyCorpus(a) => commands::toy_corpus(a),
    }
}

/// Parses `argv` (including the program name) and runs it.
pub fn run<I, T>(argv: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute(Cli::try_parse_from(argv)?)
}
