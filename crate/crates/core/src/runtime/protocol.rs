//! Newline-delimited JSON wire frames between edge and decision layer.

use serde::{Deserialize, Serialize};

use super::{Classification, Label, RuntimeError};
use crate::data::Task;

pub const PROTOCOL_VERSION: u32 = 1;
/// Longest accepted line, newline excluded.
pub const MAX_LINE_BYTES: usize = 64 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientFrame {
    pub v: u32,
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub stream_id: String,
    pub window: u64,
    pub ts_ms: u64,
    pub task: Task,
    pub label: String,
    pub score: f64,
    pub model_id: String,
}

impl ClientFrame {
    pub fn from_classification(seq: u64, c: &Classification) -> Self {
        ClientFrame {
            v: PROTOCOL_VERSION,
            seq,
            kind: "classification".into(),
            stream_id: c.stream_id.clone(),
            window: c.window_index,
            ts_ms: c.timestamp_ms,
            task: c.task,
            label: c.label.as_str().into(),
            score: c.score,
            model_id: c.model_id.clone(),
        }
    }

    /// Semantic checks beyond JSON shape.
    pub fn to_classification(&self) -> Result<Classification, RuntimeError> {
        if self.v != PROTOCOL_VERSION {
            return Err(RuntimeError::Protocol(format!("unsupported version {}", self.v)));
        }
        if self.kind != "classification" {
            return Err(RuntimeError::Protocol(format!("unexpected frame type {:?}", self.kind)));
        }
        let label = Label::parse(&self.label)
            .ok_or_else(|| RuntimeError::Protocol(format!("unknown label {:?}", self.label)))?;
        if label.task() != self.task {
            return Err(RuntimeError::Protocol(format!("label {:?} does not belong to task", self.label)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(RuntimeError::Protocol(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(Classification {
            stream_id: self.stream_id.clone(),
            window_index: self.window,
            timestamp_ms: self.ts_ms,
            task: self.task,
            label,
            score: self.score,
            model_id: self.model_id.clone(),
        })
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frame serializes");
        s.push('\n');
        s
    }
}

/// Parse one line (without its newline) into a validated classification.
pub fn parse_client_frame(line: &str) -> Result<(u64, Classification), RuntimeError> {
    let frame: ClientFrame =
        serde_json::from_str(line).map_err(|e| RuntimeError::Protocol(format!("malformed frame: {e}")))?;
    let c = frame.to_classification()?;
    Ok((frame.seq, c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerFrame {
    Ack { v: u32, seq: u64 },
    Alert { v: u32, seq: u64, severity: super::Severity },
    Error { v: u32, msg: String },
}

impl ServerFrame {
    pub fn ack(seq: u64) -> Self {
        ServerFrame::Ack { v: PROTOCOL_VERSION, seq }
    }

    pub fn alert(seq: u64) -> Self {
        ServerFrame::Alert { v: PROTOCOL_VERSION, seq, severity: super::Severity::High }
    }

    pub fn error(msg: impl Into<String>) -> Self {
        ServerFrame::Error { v: PROTOCOL_VERSION, msg: msg.into() }
    }

    pub fn seq(&self) -> Option<u64> {
        match self {
            ServerFrame::Ack { seq, .. } | ServerFrame::Alert { seq, .. } => Some(*seq),
            ServerFrame::Error { .. } => None,
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frame serializes");
        s.push('\n');
        s
    }
}
