//! `diffvoc`: dataset synthesis, training, sampling and evaluation of
//! desk-scale diffusion vocoders.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "diffvoc", version, about = "Diffusion vocoder laboratory")]
struct Cli {
    /// Root directory for outputs when a command has no explicit --out.
    #[arg(long, global = true, env = "DIFFVOC_OUT", default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise a harmonic-tone corpus as WAV files plus a manifest.
    MakeDataset(MakeDatasetArgs),
    /// Pretrain a noise predictor on the epsilon loss.
    Train(TrainArgs),
    /// Fine-tune a pretrained predictor through the few-step reverse chain.
    Finetune(FinetuneArgs),
    /// Generate audio from a mel conditioner with an inference schedule.
    Sample(SampleArgs),
    /// Score a schedule grid on the search split and report the best schedule.
    GridSearch(SweepArgs),
    /// Score a schedule grid on the test split and report mean and std.
    Sweep(SweepArgs),
    /// Objective metrics of one schedule on a split.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct MakeDatasetArgs {
    /// Output directory (default: <out-root>/dataset).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub n_clips: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clips reserved for schedule search.
    #[arg(long, default_value_t = 10)]
    pub search: usize,
    /// Clips reserved for testing.
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    /// Samples per clip.
    #[arg(long, default_value_t = 4000)]
    pub samples: usize,
    /// Overwrite an existing corpus.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a checkpoint written by the same run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory (default: <out-root>/<command>-<config digest>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: TrainArgs,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    /// Comma-separated beta-hat values, e.g. `0.001,0.5`.
    #[arg(long, value_delimiter = ',', conflicts_with = "schedule_file")]
    pub schedule: Option<Vec<f64>>,
    /// JSON file `{"betas_hat": [...]}`.
    #[arg(long)]
    pub schedule_file: Option<PathBuf>,
    /// Use a schedule that breaks the validity rules.
    #[arg(long)]
    pub allow_invalid: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Waveform whose log-mel features condition the generation.
    #[arg(long, conflicts_with = "mel")]
    pub input_wav: Option<PathBuf>,
    /// JSON file `{"n_mels": M, "frames": [[...], ...]}` of log-mel frames.
    #[arg(long)]
    pub mel: Option<PathBuf>,
    /// Output WAV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Run config supplying features and the training schedule; defaults
    /// follow the checkpoint's network preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Search,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
    Both,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Number of inference steps N; the range comes from `training.ranges_by_n`.
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    /// Mantissa grid over each decade of the range, e.g. `1,5`.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["strata", "grid_file"])]
    pub mantissas: Option<Vec<f64>>,
    /// Midpoints of this many equal strata per step (the default grid, 3).
    #[arg(long, conflicts_with = "grid_file")]
    pub strata: Option<usize>,
    /// JSON list of schedules `[{"betas_hat": [...]}, ...]`.
    #[arg(long)]
    pub grid_file: Option<PathBuf>,
    /// Clips to score (default: search for grid-search, test for sweep).
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
    /// Also write a PNG scatter of the per-schedule losses.
    #[arg(long)]
    pub plot: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
    /// Also write reference and generated spectrogram PNGs per clip.
    #[arg(long)]
    pub plot: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Bad flags or inputs; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

/// A schedule failed the validity rules; exit code 2.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for ValidationError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return 2;
        }
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<diffvoc::Error>() {
            return match e {
                diffvoc::Error::Config(_) => 1,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let root = cli.out_root;
    let result = match cli.command {
        Command::MakeDataset(a) => commands::make_dataset(&root, a),
        Command::Train(a) => commands::train(&root, a),
        Command::Finetune(a) => commands::finetune(&root, a),
        Command::Sample(a) => commands::sample(a),
        Command::GridSearch(a) => commands::sweep(&root, "grid-search", a),
        Command::Sweep(a) => commands::sweep(&root, "sweep", a),
        Command::Evaluate(a) => commands::evaluate(&root, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
