//! The `edgekd` command: every workflow of the system behind one binary.

mod commands;
pub mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edgekd_core::data::{DataError, Task};
use edgekd_core::dsp::{DspError, FeatureIoError};
use edgekd_core::eval::EvalError;
use edgekd_core::model::ModelError;
use edgekd_core::runtime::RuntimeError;
use edgekd_core::train::TrainError;
use thiserror::Error;

pub use settings::Settings;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Features(#[from] FeatureIoError),
}

impl CliError {
    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Data(_) => "data",
            CliError::Model(_) => "model",
            CliError::Train(_) => "train",
            CliError::Eval(_) => "eval",
            CliError::Runtime(_) => "runtime",
            CliError::Dsp(_) => "dsp",
            CliError::Features(_) => "features",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "edgekd", version, about = "Scream detection and valence classification with a distilled edge model")]
pub struct Cli {
    /// Global random seed; all randomness derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config file (overrides defaults, overridden by flags).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Maximum worker threads for featurization.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Force serial execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute normalized log-mel spectrograms of WAV files.
    Featurize(FeaturizeArgs),
    /// Generate a synthetic labeled corpus, stream files and a noise bank.
    SynthData(SynthArgs),
    /// Train the ResNet18 teacher.
    TrainTeacher(TrainArgs),
    /// Distill a frozen teacher into the student.
    Distill(DistillArgs),
    /// Accuracy on a manifest split, optionally under environmental noise.
    Eval(EvalArgs),
    /// Load-time and forward-latency benchmark.
    Bench(BenchArgs),
    /// Export penultimate-layer embeddings.
    Embed(EmbedArgs),
    /// Two-stage classification of whole WAV files.
    Infer(InferArgs),
    /// Sliding-window classification of a recording, optionally sent to a decision server.
    Stream(StreamArgs),
    /// Run the decision server.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// Input WAV files.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output directory; one `<stem>.melf` per input.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of labeled clips.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Detect,
    Type,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Detect => Task::Detect,
            TaskArg::Type => Task::Type,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Test,
}

/// Record selection shared by the data-driven commands.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Manifest CSV.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Share of (balanced) records used for training, in (0, 1].
    #[arg(long, value_parser = parse_fraction)]
    pub train_fraction: Option<f64>,
    /// Keep class imbalance instead of downsampling the majority class.
    #[arg(long)]
    pub no_balance: bool,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = parse_positive)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Share of training data held out for early stopping (0 disables).
    #[arg(long, value_parser = parse_unit_open)]
    pub val_fraction: Option<f64>,
    /// Stop once an epoch's training accuracy reaches this value.
    #[arg(long, value_parser = parse_unit)]
    pub target_acc: Option<f64>,
    /// Disable waveform and spectrogram augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Frozen teacher model file.
    #[arg(long)]
    pub teacher: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Weight of the distillation term, in [0, 1].
    #[arg(long, value_parser = parse_unit)]
    pub alpha: Option<f64>,
    /// Softmax temperature, > 0.
    #[arg(long, value_parser = parse_positive)]
    pub temp: Option<f64>,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Directory with one sub-directory of WAV files per noise category.
    #[arg(long)]
    pub noise_dir: Option<PathBuf>,
    /// Noise categories (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    /// SNR values in dB (comma separated); one is drawn per utterance.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model files to benchmark.
    #[arg(long, required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
    /// Timed trials (at least 10).
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Also write `series,label,value` plot data to this CSV.
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Output matrix file; labels go to `<out>.labels.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Scream-detection model.
    #[arg(long)]
    pub detector: PathBuf,
    /// Valence model.
    #[arg(long)]
    pub typer: PathBuf,
    /// Alert threshold on the negative-valence score, in [0, 1].
    #[arg(long, value_parser = parse_unit)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Recording to window.
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    pub input: Option<PathBuf>,
    /// Pre-computed feature files, one per window.
    #[arg(long, num_args = 1..)]
    pub features: Option<Vec<PathBuf>>,
    /// Decision server `host:port`; decisions stay local without it.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "stream-0")]
    pub stream_id: String,
    /// Window length in seconds.
    #[arg(long, value_parser = parse_positive)]
    pub window: Option<f64>,
    /// Hop in seconds.
    #[arg(long, value_parser = parse_positive)]
    pub hop: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address.
    #[arg(long)]
    pub bind: Option<String>,
    /// Alert file (one JSON event per line, appended).
    #[arg(long)]
    pub sink: Option<PathBuf>,
    /// Do not echo alerts on stdout.
    #[arg(long)]
    pub no_stdout: bool,
    /// POST each alert to this URL.
    #[arg(long)]
    pub webhook: Option<String>,
    #[arg(long, value_parser = parse_unit)]
    pub threshold: Option<f64>,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"))
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_unit_open(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

impl DataArgs {
    fn apply(&self, s: &mut Settings) {
        if let Some(t) = self.task {
            s.data.task = t.into();
        }
        if let Some(f) = self.train_fraction {
            s.data.train_fraction = f;
        }
        if self.no_balance {
            s.data.balance = false;
        }
    }
}

impl TrainOpts {
    fn apply(&self, s: &mut Settings) {
        let t = &mut s.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.val_fraction {
            t.val_fraction = v;
        }
        if self.target_acc.is_some() {
            t.target_train_acc = self.target_acc;
        }
        if self.no_augment {
            t.augment.enabled = false;
        }
    }
}

/// Defaults, then the config file, then global and subcommand flags.
pub fn resolve(cli: &Cli) -> Result<Settings, CliError> {
    let mut s = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    if let Some(n) = cli.threads {
        s.threads = n;
    }
    s.deterministic |= cli.deterministic;
    match &cli.command {
        Command::TrainTeacher(a) => {
            a.data.apply(&mut s);
            a.opts.apply(&mut s);
        }
        Command::Distill(a) => {
            a.data.apply(&mut s);
            a.opts.apply(&mut s);
            if let Some(v) = a.alpha {
                s.train.alpha = v;
            }
            if let Some(v) = a.temp {
                s.train.temperature = v;
            }
        }
        Command::Eval(a) => {
            a.data.apply(&mut s);
            if let Some(c) = &a.categories {
                s.noise.categories = c.clone();
            }
            if let Some(v) = &a.snr {
                s.noise.snr_db = v.clone();
            }
        }
        Command::Embed(a) => a.data.apply(&mut s),
        Command::Bench(a) => {
            if let Some(v) = a.trials {
                s.bench.trials = v;
            }
            if let Some(v) = a.warmup {
                s.bench.warmup = v;
            }
        }
        Command::Infer(a) => a.pipeline.apply(&mut s),
        Command::Stream(a) => {
            a.pipeline.apply(&mut s);
            if let Some(v) = a.window {
                s.stream.window_s = v;
            }
            if let Some(v) = a.hop {
                s.stream.hop_s = v;
            }
        }
        Command::Serve(a) => {
            if let Some(v) = &a.bind {
                s.decision.bind = v.clone();
            }
            if a.sink.is_some() {
                s.decision.sink = a.sink.clone();
            }
            if a.no_stdout {
                s.decision.stdout = false;
            }
            if a.webhook.is_some() {
                s.decision.webhook = a.webhook.clone();
            }
            if let Some(v) = a.threshold {
                s.decision.policy.threshold = v;
            }
        }
        Command::Featurize(_) | Command::SynthData(_) => {}
    }
    s.train = s.hyperparams();
    s.validate()?;
    Ok(s)
}

impl PipelineArgs {
    fn apply(&self, s: &mut Settings) {
        if let Some(v) = self.threshold {
            s.decision.policy.threshold = v;
        }
    }
}

/// Resolve, log the configuration to stderr, and execute.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let settings = resolve(&cli)?;
    eprintln!("config: {}", serde_json::to_string(&settings).expect("settings serialize"));
    commands::execute(&cli, &settings)
}
