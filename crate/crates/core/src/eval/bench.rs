use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::model::{count_params, encode_model, load_model, random_input, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

impl LatencyStats {
    /// Summary of `samples` (milliseconds); percentiles by nearest rank.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        LatencyStats {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
            min: s[0],
            max: s[s.len() - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    pub load_ms: Option<LatencyStats>,
    pub forward_ms: Option<LatencyStats>,
    pub trials: usize,
    pub warmup: usize,
    /// Threads used in the timed region.
    pub threads: usize,
    pub input_shape: Option<Vec<usize>>,
    pub machine: String,
}

/// CPU model, core count and platform.
pub fn machine_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|v| v.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {cores} logical cores; {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < 10 {
        return Err(EvalError::InvalidSettings(format!("need at least 10 trials, got {trials}")));
    }
    Ok(())
}

/// Time single-threaded eval forwards on a fixed pre-allocated input.
pub fn bench_forward(model: &Model, input_shape: &[usize], trials: usize, warmup: usize) -> Result<LatencyReport> {
    check_trials(trials)?;
    let x = Arc::new(random_input(input_shape, 0));
    for _ in 0..warmup {
        model.forward_shared(&x)?;
    }
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        let out = model.forward_shared(&x)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        drop(out);
    }
    Ok(LatencyReport {
        model: model.model_id(),
        load_ms: None,
        forward_ms: Some(LatencyStats::from_samples(&samples)),
        trials,
        warmup,
        threads: 1,
        input_shape: Some(input_shape.to_vec()),
        machine: machine_descriptor(),
    })
}

/// Time reading and decoding a model file, fresh read each trial.
pub fn bench_load(path: &Path, trials: usize, warmup: usize) -> Result<LatencyReport> {
    check_trials(trials)?;
    std::fs::metadata(path)?;
    let mut id = String::new();
    for _ in 0..warmup {
        id = load_model(path)?.model_id();
    }
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        let m = load_model(path)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        if id.is_empty() {
            id = m.model_id();
        }
    }
    Ok(LatencyReport {
        model: id,
        load_ms: Some(LatencyStats::from_samples(&samples)),
        forward_ms: None,
        trials,
        warmup,
        threads: 1,
        input_shape: None,
        machine: machine_descriptor(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub kind: String,
    pub total_params: usize,
    pub trainable_params: usize,
    /// Raw f32 tensor bytes, 4 × total_params.
    pub payload_bytes: usize,
    pub file_bytes: usize,
    pub mib: f64,
}

pub fn size_report(model: &Model) -> Result<SizeReport> {
    let total = count_params(model, false);
    let file_bytes = encode_model(model)?.len();
    Ok(SizeReport {
        kind: model.kind().as_str().into(),
        total_params: total,
        trainable_params: count_params(model, true),
        payload_bytes: total * 4,
        file_bytes,
        mib: file_bytes as f64 / 1_048_576.0,
    })
}
