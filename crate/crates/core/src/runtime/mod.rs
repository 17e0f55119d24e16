//! Deployed pipeline: two-stage window classification on the edge, plus the
//! decision layer (policy, wire protocol, server and client).

mod client;
mod protocol;
mod server;
mod stream;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Task;
use crate::dsp::{DspError, MelSpec};
use crate::eval::decide_class;
use crate::model::{batch_from_specs, softmax_rows, Model, ModelError};

pub use client::{ClientStats, DecisionClient, DEFAULT_BUFFER_CAP};
pub use protocol::{parse_client_frame, ClientFrame, ServerFrame, MAX_LINE_BYTES, PROTOCOL_VERSION};
pub use server::{serve_decision, spawn_server, AlertSinks, ServerHandle};
pub use stream::{run_stream, window_count, StreamConfig, StreamReport, StreamSource, WindowResult};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("source error: {0}")]
    Source(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RuntimeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Scream,
    NonScream,
    Positive,
    Negative,
}

impl Label {
    pub fn for_class(task: Task, class: usize) -> Label {
        match (task, class) {
            (Task::Detect, 1) => Label::Scream,
            (Task::Detect, _) => Label::NonScream,
            (Task::Type, 1) => Label::Negative,
            (Task::Type, _) => Label::Positive,
        }
    }

    pub fn task(self) -> Task {
        match self {
            Label::Scream | Label::NonScream => Task::Detect,
            Label::Positive | Label::Negative => Task::Type,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Scream => "scream",
            Label::NonScream => "non_scream",
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        [Label::Scream, Label::NonScream, Label::Positive, Label::Negative].into_iter().find(|l| l.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub stream_id: String,
    pub window_index: u64,
    pub timestamp_ms: u64,
    pub task: Task,
    pub label: Label,
    /// Softmax probability of `label`.
    pub score: f64,
    pub model_id: String,
}

/// Where a window sits in its stream.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowContext {
    pub stream_id: String,
    pub window_index: u64,
    pub timestamp_ms: u64,
}

/// Preloaded models for the two stages.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub detector: Model,
    pub typer: Model,
    detector_id: String,
    typer_id: String,
}

impl Pipeline {
    pub fn new(detector: Model, typer: Model) -> Self {
        let (detector_id, typer_id) = (detector.model_id(), typer.model_id());
        Pipeline { detector, typer, detector_id, typer_id }
    }
}

fn run_stage(model: &Model, id: &str, task: Task, spec: &MelSpec, ctx: &WindowContext) -> Result<Classification> {
    let x = batch_from_specs(&[spec], model.config.in_channels)?;
    let probs = softmax_rows(&model.forward(&x)?).remove(0);
    let class = decide_class(&probs);
    Ok(Classification {
        stream_id: ctx.stream_id.clone(),
        window_index: ctx.window_index,
        timestamp_ms: ctx.timestamp_ms,
        task,
        label: Label::for_class(task, class),
        score: probs[class],
        model_id: id.to_string(),
    })
}

/// Stage 1 (scream detection) always; stage 2 (valence) only for screams.
pub fn classify_window(pipeline: &Pipeline, spec: &MelSpec, ctx: &WindowContext) -> Result<Vec<Classification>> {
    if !spec.normalized {
        return Err(RuntimeError::ShapeMismatch("spectrogram is not normalized".into()));
    }
    let first = run_stage(&pipeline.detector, &pipeline.detector_id, Task::Detect, spec, ctx)?;
    let mut chain = vec![first];
    if chain[0].label == Label::Scream {
        chain.push(run_stage(&pipeline.typer, &pipeline.typer_id, Task::Type, spec, ctx)?);
    }
    Ok(chain)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub policy_id: String,
    /// Minimum negative-valence score for an alert.
    pub threshold: f64,
}

impl Default for Policy {
    fn default() -> Self {
        Policy { policy_id: "negative-scream-v1".into(), threshold: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Alert,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    High,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub kind: EventKind,
    pub severity: Severity,
    /// Last classification of the chain.
    pub classification: Classification,
    pub policy_id: String,
}

/// True iff the chain holds a scream detection followed by a negative
/// valence whose score reaches the threshold.
pub fn is_alert(chain: &[Classification], policy: &Policy) -> bool {
    let scream = chain.iter().any(|c| c.task == Task::Detect && c.label == Label::Scream);
    let negative = chain.iter().any(|c| c.task == Task::Type && c.label == Label::Negative && c.score >= policy.threshold);
    scream && negative
}

/// Pure decision for one window's chain. Panics on an empty chain.
pub fn decide(chain: &[Classification], policy: &Policy) -> DecisionEvent {
    let alert = is_alert(chain, policy);
    DecisionEvent {
        kind: if alert { EventKind::Alert } else { EventKind::Log },
        severity: if alert { Severity::High } else { Severity::None },
        classification: chain.last().expect("non-empty classification chain").clone(),
        policy_id: policy.policy_id.clone(),
    }
}
