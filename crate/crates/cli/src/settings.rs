//! Resolved run configuration: built-in defaults, then the TOML config
//! file, then command-line flags.

use std::path::{Path, PathBuf};

use edgekd_core::data::{SnrPolicy, Task, NOISE_CATEGORIES};
use edgekd_core::runtime::{Policy, DEFAULT_BUFFER_CAP};
use edgekd_core::train::Hyperparams;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    /// Worker cap for featurization.
    pub threads: usize,
    /// Force serial execution.
    pub deterministic: bool,
    pub data: DataSettings,
    pub train: Hyperparams,
    pub noise: NoiseSettings,
    pub bench: BenchSettings,
    pub stream: StreamSettings,
    pub decision: DecisionSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            threads: 1,
            deterministic: false,
            data: DataSettings::default(),
            train: Hyperparams::default(),
            noise: NoiseSettings::default(),
            bench: BenchSettings::default(),
            stream: StreamSettings::default(),
            decision: DecisionSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub task: Task,
    /// Share of records used for training; 1.0 trains on everything.
    pub train_fraction: f64,
    /// Downsample the majority class before splitting.
    pub balance: bool,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings { task: Task::Detect, train_fraction: 0.8, balance: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSettings {
    pub categories: Vec<String>,
    /// Per-utterance SNR drawn uniformly from this list (dB).
    pub snr_db: Vec<f64>,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings { categories: NOISE_CATEGORIES.iter().map(|s| s.to_string()).collect(), snr_db: vec![5.0, 10.0, 15.0, 20.0] }
    }
}

impl NoiseSettings {
    pub fn policy(&self) -> SnrPolicy {
        match self.snr_db.as_slice() {
            [] => SnrPolicy::Clean,
            [x] => SnrPolicy::Fixed(*x),
            xs => SnrPolicy::Choice(xs.to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub trials: usize,
    pub warmup: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { trials: 100, warmup: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSettings {
    pub window_s: f64,
    pub hop_s: f64,
    pub buffer_cap: usize,
}

impl Default for StreamSettings {
    fn default() -> Self {
        StreamSettings { window_s: 3.0, hop_s: 1.5, buffer_cap: DEFAULT_BUFFER_CAP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionSettings {
    pub bind: String,
    pub policy: Policy,
    pub sink: Option<PathBuf>,
    pub stdout: bool,
    pub webhook: Option<String>,
}

impl Default for DecisionSettings {
    fn default() -> Self {
        DecisionSettings { bind: "127.0.0.1:7878".into(), policy: Policy::default(), sink: None, stdout: true, webhook: None }
    }
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Hyperparameters with the global seed and worker settings applied.
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            seed: self.seed,
            workers: if self.deterministic { 1 } else { self.threads.max(1) },
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.hyperparams().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(CliError::Usage(format!("train fraction {} outside (0, 1]", self.data.train_fraction)));
        }
        if !(0.0..=1.0).contains(&self.decision.policy.threshold) {
            return Err(CliError::Usage(format!("threshold {} outside [0, 1]", self.decision.policy.threshold)));
        }
        if !(self.stream.window_s > 0.0 && self.stream.hop_s > 0.0) {
            return Err(CliError::Usage("window and hop must be positive".into()));
        }
        Ok(())
    }
}
