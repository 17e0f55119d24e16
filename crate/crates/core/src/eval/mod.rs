//! Accuracy evaluation (clean and noisy), embedding export, and the
//! latency/size benchmarks.

mod bench;
mod report;

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::data::{mix_noise_detailed, DataError, Manifest, NoiseBank, SnrPolicy, Task};
use crate::dsp::{self, DspError, FeatureIoError, MelSpec, MelfMatrix};
use crate::model::{batch_from_specs, softmax_rows, Model, ModelError};
use crate::seed;

pub use bench::{bench_forward, bench_load, machine_descriptor, size_report, LatencyReport, LatencyStats, SizeReport};
pub use report::{
    accuracy_table, latency_table, noise_table, size_table, write_plot_data, AccuracyRow, PlotPoint, RefAccuracy,
    RefNoise, RefSize, Reference,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("record {0} has no label for this task")]
    UnlabeledRecord(String),
    #[error("noise category {0:?} missing or empty")]
    MissingCategory(String),
    #[error("invalid benchmark settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Features(#[from] FeatureIoError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Evaluation batch size; affects speed only.
const EVAL_BATCH: usize = 16;

/// Binary classification metrics. `confusion[truth][predicted]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub confusion: [[u64; 2]; 2],
    pub n: u64,
}

impl Metrics {
    pub fn from_confusion(confusion: [[u64; 2]; 2]) -> Self {
        let n: u64 = confusion.iter().flatten().sum();
        let hits = confusion[0][0] + confusion[1][1];
        Metrics { accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 }, confusion, n }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Self {
        let mut c = [[0u64; 2]; 2];
        for (&t, &p) in truth.iter().zip(predicted) {
            c[t.min(1)][p.min(1)] += 1;
        }
        Self::from_confusion(c)
    }

    /// Accuracy in percent, rounded to two decimals.
    pub fn accuracy_pct(&self) -> f64 {
        (self.accuracy * 10_000.0).round() / 100.0
    }

    pub fn merge(&self, other: &Metrics) -> Metrics {
        let mut c = self.confusion;
        for (i, row) in other.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                c[i][j] += v;
            }
        }
        Self::from_confusion(c)
    }
}

/// Class 1 only when its probability strictly exceeds 0.5.
pub fn decide_class(probs: &[f64]) -> usize {
    usize::from(probs.get(1).is_some_and(|&p| p > 0.5))
}

/// Predicted classes for a set of spectrograms.
pub fn predict(model: &Model, specs: &[MelSpec]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(specs.len());
    for chunk in specs.chunks(EVAL_BATCH) {
        let refs: Vec<&MelSpec> = chunk.iter().collect();
        let x = batch_from_specs(&refs, model.config.in_channels)?;
        out.extend(softmax_rows(&model.forward(&x)?).iter().map(|p| decide_class(p)));
    }
    Ok(out)
}

fn labels_for(manifest: &Manifest, task: Task) -> Result<Vec<usize>> {
    manifest
        .records
        .iter()
        .map(|r| r.label(task).ok_or_else(|| EvalError::UnlabeledRecord(r.path.clone())))
        .collect()
}

fn load_clips(manifest: &Manifest, task: Task) -> Result<Vec<AudioClip>> {
    labels_for(manifest, task)?;
    Ok(manifest.load_clips(task)?.into_iter().map(|c| c.clip).collect())
}

/// Metrics of `model` on already-canonical clips.
pub fn evaluate_clips(model: &Model, clips: &[AudioClip], labels: &[usize]) -> Result<Metrics> {
    let specs = clips.iter().map(dsp::featurize).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Metrics::from_predictions(labels, &predict(model, &specs)?))
}

/// Featurize, forward and threshold every record of `manifest`.
pub fn evaluate(model: &Model, manifest: &Manifest, task: Task) -> Result<Metrics> {
    let labels = labels_for(manifest, task)?;
    evaluate_clips(model, &load_clips(manifest, task)?, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyReport {
    pub per_category: IndexMap<String, Metrics>,
    /// Sum of the per-category confusions: every test record once per
    /// category, i.e. categories weighted uniformly.
    pub pooled: Metrics,
    /// Paths of the records that had noise mixed in.
    pub noised: Vec<String>,
}

/// Evaluate with environmental noise mixed into the test records only.
/// Each category gets an independent, seeded per-utterance noise draw.
pub fn evaluate_noisy(
    model: &Model,
    test: &Manifest,
    task: Task,
    bank: &NoiseBank,
    categories: &[String],
    snr: &SnrPolicy,
    seed: u64,
) -> Result<NoisyReport> {
    for c in categories {
        bank.get(c).map_err(|_| EvalError::MissingCategory(c.clone()))?;
    }
    let labels = labels_for(test, task)?;
    let clips = load_clips(test, task)?;
    let mut per_category = IndexMap::new();
    let mut pooled = Metrics::default();
    for cat in categories {
        let mut rng = seed::keyed_rng(seed, "noise", &[crate::seed::sub_seed(0, cat)]);
        let mut mixed = Vec::with_capacity(clips.len());
        for clip in &clips {
            let db = snr.draw(&mut rng);
            if db == f64::INFINITY {
                mixed.push(clip.clone());
                continue;
            }
            let noise = bank.pick(cat, clip.len(), &mut rng)?;
            mixed.push(mix_noise_detailed(clip, noise, db, &mut rng)?.clip);
        }
        let m = evaluate_clips(model, &mixed, &labels)?;
        pooled = pooled.merge(&m);
        per_category.insert(cat.clone(), m);
    }
    let noised = if *snr == SnrPolicy::Clean { Vec::new() } else { test.records.iter().map(|r| r.path.clone()).collect() };
    Ok(NoisyReport { per_category, pooled, noised })
}

/// Write penultimate activations as a MELF matrix (one row per record) and
/// `<out>.labels.csv` with each row's path and label. Returns the row count.
pub fn export_embeddings(model: &Model, manifest: &Manifest, task: Task, out_path: &Path) -> Result<usize> {
    let width = model.config.embedding_width();
    let mut values = Vec::with_capacity(manifest.len() * width);
    let mut specs = Vec::with_capacity(EVAL_BATCH);
    let flush = |specs: &mut Vec<MelSpec>, values: &mut Vec<f32>| -> Result<()> {
        if specs.is_empty() {
            return Ok(());
        }
        let refs: Vec<&MelSpec> = specs.iter().collect();
        let x = batch_from_specs(&refs, model.config.in_channels)?;
        values.extend_from_slice(model.penultimate(&x)?.data());
        specs.clear();
        Ok(())
    };
    for r in &manifest.records {
        let path = manifest.resolve(r);
        let clip = crate::audio::read_wav(&path)
            .and_then(|c| crate::audio::canonicalize(&c))
            .map_err(|source| DataError::Audio { path, source })?;
        specs.push(dsp::featurize(&clip)?);
        if specs.len() == EVAL_BATCH {
            flush(&mut specs, &mut values)?;
        }
    }
    flush(&mut specs, &mut values)?;
    dsp::write_melf(out_path, &MelfMatrix { sample_rate: 0, normalized: false, rows: manifest.len(), cols: width, values })?;
    let mut w = csv::Writer::from_path(labels_path(out_path))?;
    w.write_record(["row", "path", "label"])?;
    for (i, r) in manifest.records.iter().enumerate() {
        let label = r.label(task).map(|l| task.class_names()[l]).unwrap_or("");
        w.write_record([i.to_string().as_str(), r.path.as_str(), label])?;
    }
    w.flush()?;
    Ok(manifest.len())
}

pub fn labels_path(out_path: &Path) -> PathBuf {
    let mut s = out_path.as_os_str().to_os_string();
    s.push(".labels.csv");
    PathBuf::from(s)
}
