//! Teacher training and response-based distillation into the student.
//!
//! Both phases share one mini-batch Adam loop; the student phase adds the
//! distillation term computed from frozen-teacher logits.

mod augment;
mod loss;

use std::time::Instant;

use edgekd_tensor::{adam_step, AdamConfig, AdamState, Graph, Mode, Tensor, TensorError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::dsp::{self, DspError, MelSpec};
use crate::model::{self, batch_from_specs, Model, ModelConfig, ModelError};
use crate::seed;

pub use augment::{augment_spec, augment_waveform, freq_mask, stretch, time_mask, AugmentConfig};
pub use loss::{distillation_loss, distillation_loss_value, total_loss};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("temperature must be positive, got {0}")]
    InvalidT(f64),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("teacher must be frozen before distillation")]
    TeacherNotFrozen,
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    /// Share of the training data held out for early stopping (0 disables).
    pub val_fraction: f64,
    /// Stop once an epoch's training accuracy reaches this value.
    pub target_train_acc: Option<f64>,
    /// Featurization workers per batch; results do not depend on it.
    pub workers: usize,
    pub augment: AugmentConfig,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.9999,
            eps: 1e-8,
            batch_size: 64,
            epochs: 100,
            temperature: 2.0,
            alpha: 0.5,
            seed: 0,
            patience: 10,
            val_fraction: 0.1,
            target_train_acc: None,
            workers: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidHyperparams(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrainError::InvalidT(self.temperature));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad(format!("adam betas {}, {} / eps {}", self.beta1, self.beta2, self.eps));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction {}", self.val_fraction));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// One labeled, canonical training clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub clip: AudioClip,
    pub label: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub wall_ms: f64,
}

/// Equality ignores wall-clock time.
impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        (self.epoch, self.loss, self.train_acc, self.val_acc, self.val_loss)
            == (o.epoch, o.loss, o.train_acc, o.val_acc, o.val_loss)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn train_loss(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn train_acc(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_acc).collect()
    }

    pub fn val_acc(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.val_acc).collect()
    }
}

/// Train a teacher on cross-entropy; the returned model is frozen.
pub fn train_teacher(data: &[LabeledClip], hyper: &Hyperparams) -> Result<(Model, TrainHistory)> {
    train_teacher_with(data, hyper, &mut |_| {})
}

pub fn train_teacher_with(
    data: &[LabeledClip],
    hyper: &Hyperparams,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    let (mut m, h) = fit(&ModelConfig::teacher(), data, hyper, None, log)?;
    m.freeze();
    Ok((m, h))
}

/// Train a student with `total_loss` against a frozen teacher.
pub fn distill(teacher: &Model, data: &[LabeledClip], hyper: &Hyperparams) -> Result<(Model, TrainHistory)> {
    distill_with(teacher, data, hyper, &mut |_| {})
}

pub fn distill_with(
    teacher: &Model,
    data: &[LabeledClip],
    hyper: &Hyperparams,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    if !teacher.is_frozen() {
        return Err(TrainError::TeacherNotFrozen);
    }
    fit(&ModelConfig::student(), data, hyper, Some(teacher), log)
}

/// Train any architecture on cross-entropy alone.
pub fn train_plain(
    config: &ModelConfig,
    data: &[LabeledClip],
    hyper: &Hyperparams,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    fit(config, data, hyper, None, log)
}

/// Deterministic train/validation index split.
fn carve_validation(n: usize, hyper: &Hyperparams) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let n_val = (n as f64 * hyper.val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut seed::rng(hyper.seed, "validation"));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Featurize (and, if enabled, augment) the given samples. Each sample's
/// augmentation stream is keyed by (seed, index, epoch), so the result does
/// not depend on the worker count.
fn featurize_batch(
    data: &[LabeledClip],
    indices: &[usize],
    epoch: usize,
    hyper: &Hyperparams,
) -> Result<Vec<MelSpec>> {
    let one = |i: usize| -> Result<MelSpec> {
        let clip = &data[i].clip;
        if !hyper.augment.enabled {
            return Ok(dsp::featurize(clip)?);
        }
        let mut rng = seed::keyed_rng(hyper.seed, "augment", &[i as u64, epoch as u64]);
        let wav = augment_waveform(clip, &mut rng, &hyper.augment);
        let spec = dsp::featurize(&wav)?;
        Ok(augment_spec(&spec, &mut rng, &hyper.augment))
    };
    let workers = hyper.workers.clamp(1, indices.len().max(1));
    if workers == 1 {
        return indices.iter().map(|&i| one(i)).collect();
    }
    let chunk = indices.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&i| one(i)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(indices.len());
        for h in handles {
            out.extend(h.join().expect("featurization worker panicked")?);
        }
        Ok(out)
    })
}

/// Eval-mode logits for `specs`, in chunks of `batch`.
pub fn predict_logits(m: &Model, specs: &[MelSpec], batch: usize) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(specs.len() * m.config.num_classes);
    for chunk in specs.chunks(batch.max(1)) {
        let refs: Vec<&MelSpec> = chunk.iter().collect();
        let x = batch_from_specs(&refs, m.config.in_channels)?;
        rows.extend_from_slice(m.forward(&x)?.data());
    }
    Ok(Tensor::new(&[specs.len(), m.config.num_classes], rows)?)
}

fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::<f32>::inference();
    let x = g.constant(logits.clone());
    let l = g.cross_entropy(x, labels)?;
    Ok(g.value(l)?.item().expect("scalar") as f64)
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn fit(
    config: &ModelConfig,
    data: &[LabeledClip],
    hyper: &Hyperparams,
    teacher: Option<&Model>,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(bad) = data.iter().find(|d| d.label >= config.num_classes) {
        return Err(TrainError::BadLabel { label: bad.label, classes: config.num_classes });
    }
    let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
    let (train_idx, val_idx) = carve_validation(data.len(), hyper);

    let mut m = model::build(config, seed::sub_seed(hyper.seed, "init"))?;
    let adam = hyper.adam();
    let mut state = AdamState::new();
    let mut dropout_rng = seed::rng(hyper.seed, "dropout");

    // without augmentation, features (and teacher logits) never change
    let cached: Option<Vec<MelSpec>> =
        if hyper.augment.enabled { None } else { Some(featurize_batch(data, &(0..data.len()).collect::<Vec<_>>(), 0, hyper)?) };
    let cached_teacher = match (&cached, teacher) {
        (Some(specs), Some(t)) => Some(predict_logits(t, specs, hyper.batch_size)?),
        _ => None,
    };
    let val_specs = match &cached {
        Some(all) => val_idx.iter().map(|&i| all[i].clone()).collect(),
        None => {
            let plain = Hyperparams { augment: AugmentConfig::disabled(), ..hyper.clone() };
            featurize_batch(data, &val_idx, 0, &plain)?
        }
    };
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
    // un-augmented training features for batch-norm recalibration
    let has_bn = !m.buffers().is_empty();
    let clean_train: Vec<MelSpec> = match (&cached, has_bn) {
        (_, false) => Vec::new(),
        (Some(all), true) => train_idx.iter().map(|&i| all[i].clone()).collect(),
        (None, true) => {
            let plain = Hyperparams { augment: AugmentConfig::disabled(), ..hyper.clone() };
            featurize_batch(data, &train_idx, 0, &plain)?
        }
    };
    let recalibrate = |m: &mut Model| -> Result<()> {
        let batches = clean_train.chunks(hyper.batch_size).map(|c| {
            batch_from_specs(&c.iter().collect::<Vec<_>>(), config.in_channels).expect("uniform spectrogram shapes")
        });
        Ok(m.recalibrate_batch_norm(batches)?)
    };

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;
    let mut order = train_idx.clone();
    for epoch in 0..hyper.epochs {
        let started = Instant::now();
        order.shuffle(&mut seed::keyed_rng(hyper.seed, "shuffle", &[epoch as u64]));
        let (mut loss_sum, mut hits) = (0.0, 0);
        for batch in order.chunks(hyper.batch_size) {
            let specs = match &cached {
                Some(all) => batch.iter().map(|&i| all[i].clone()).collect(),
                None => featurize_batch(data, batch, epoch, hyper)?,
            };
            let refs: Vec<&MelSpec> = specs.iter().collect();
            let x = batch_from_specs(&refs, config.in_channels)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let teacher_logits = match (teacher, &cached_teacher) {
                (Some(_), Some(all)) => {
                    let k = all.shape()[1];
                    let rows = batch.iter().flat_map(|&i| all.data()[i * k..(i + 1) * k].to_vec()).collect();
                    Some(Tensor::new(&[batch.len(), k], rows)?)
                }
                (Some(t), None) => Some(t.forward(&x)?),
                _ => None,
            };

            let mut g = Graph::<f32>::new();
            let mut binding = m.bind(&mut g, true);
            let xv = g.constant(x);
            let out = m.forward_graph(&mut g, &mut binding, xv, Mode::Train, &mut dropout_rng)?;
            let loss = match teacher_logits {
                Some(tl) => {
                    let tv = g.constant(tl);
                    total_loss(&mut g, out.logits, tv, &y, hyper.temperature, hyper.alpha)?
                }
                None => g.cross_entropy(out.logits, &y)?,
            };
            loss_sum += g.value(loss)?.item().expect("scalar") as f64 * batch.len() as f64;
            hits += correct(g.value(out.logits)?, &y);
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = binding
                .params
                .iter()
                .map(|&v| grads.take(v).ok_or(TensorError::DetachedNode))
                .collect::<std::result::Result<_, _>>()?;
            m.store_running_stats(&binding.stats);
            drop(g);
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam_step(&mut m.params_mut(), &grad_refs, &mut state, &adam)?;
        }

        let n_train = order.len() as f64;
        let (val_acc, val_loss) = if val_specs.is_empty() {
            (None, None)
        } else {
            recalibrate(&mut m)?;
            let logits = predict_logits(&m, &val_specs, hyper.batch_size)?;
            let acc = correct(&logits, &val_labels) as f64 / val_labels.len() as f64;
            (Some(acc), Some(cross_entropy_value(&logits, &val_labels)?))
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n_train,
            train_acc: hits as f64 / n_train,
            val_acc,
            val_loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        log(&record);
        let train_acc = record.train_acc;
        history.epochs.push(record);

        if let Some(vl) = val_loss {
            if best.as_ref().map_or(true, |(b, _)| vl < *b) {
                best = Some((vl, m.clone()));
                history.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= hyper.patience {
                    history.stopped_early = true;
                    break;
                }
            }
        } else {
            history.best_epoch = epoch;
        }
        if hyper.target_train_acc.is_some_and(|t| train_acc >= t) {
            // keep the weights that reached the target
            best = None;
            history.best_epoch = epoch;
            history.stopped_early = epoch + 1 < hyper.epochs;
            break;
        }
    }
    match best {
        Some((_, b)) => m = b,
        None => recalibrate(&mut m)?,
    }
    m.metadata.insert("hyperparams".into(), serde_json::to_value(hyper).expect("serializable"));
    m.metadata.insert("features".into(), serde_json::to_value(dsp::FeatureParams::default()).expect("serializable"));
    m.metadata.insert(
        "training".into(),
        serde_json::json!({
            "distilled": teacher.is_some(),
            "teacher_id": teacher.map(Model::model_id),
            "epochs_run": history.epochs.len(),
            "best_epoch": history.best_epoch,
            "train_samples": train_idx.len(),
            "val_samples": val_idx.len(),
        }),
    );
    Ok((m, history))
}
