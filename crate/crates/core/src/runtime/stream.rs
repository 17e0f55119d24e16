//! Sliding-window processing of a recording or a sequence of feature files.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use super::client::{ClientStats, DecisionClient};
use super::protocol::ServerFrame;
use super::{classify_window, decide, Classification, DecisionEvent, EventKind, Pipeline, Policy, Result, RuntimeError, WindowContext};
use crate::audio::{read_wav, resample, CANONICAL_RATE_HZ};
use crate::dsp::{featurize, read_features};

#[derive(Clone, Debug)]
pub enum StreamSource {
    Wav(PathBuf),
    /// One pre-computed spectrogram per window, in order.
    Features(Vec<PathBuf>),
}

#[derive(Clone, Debug)]
pub struct StreamConfig {
    pub stream_id: String,
    pub window_s: f64,
    pub hop_s: f64,
    pub policy: Policy,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig { stream_id: "stream-0".into(), window_s: 3.0, hop_s: 1.5, policy: Policy::default() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WindowResult {
    pub index: u64,
    pub start_ms: u64,
    pub classifications: Vec<Classification>,
    /// Local, advisory decision.
    pub event: DecisionEvent,
    pub replies: Vec<ServerFrame>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StreamReport {
    pub stream_id: String,
    pub windows: Vec<WindowResult>,
    pub local_alerts: usize,
    pub server_alerts: usize,
    pub client: Option<ClientStats>,
}

/// Windows over `n` samples; a recording shorter than one window still
/// yields one (zero-padded) window.
pub fn window_count(n: usize, window: usize, hop: usize) -> usize {
    if n <= window || hop == 0 {
        1
    } else {
        1 + (n - window) / hop
    }
}

/// Featurize, classify, decide and (optionally) transmit each window in order.
/// `on_window` sees every result as soon as it is available.
pub fn run_stream(
    source: &StreamSource,
    pipeline: &Pipeline,
    config: &StreamConfig,
    mut client: Option<&mut DecisionClient>,
    mut on_window: impl FnMut(&WindowResult),
) -> Result<StreamReport> {
    if !(config.window_s > 0.0 && config.hop_s > 0.0) {
        return Err(RuntimeError::Source(format!("invalid window {} s / hop {} s", config.window_s, config.hop_s)));
    }
    let hop_ms = (config.hop_s * 1000.0).round() as u64;
    let mut report = StreamReport {
        stream_id: config.stream_id.clone(),
        windows: Vec::new(),
        local_alerts: 0,
        server_alerts: 0,
        client: None,
    };

    let mut process = |index: u64, start_ms: u64, started: Instant, spec: crate::dsp::MelSpec| -> Result<()> {
        let ctx = WindowContext { stream_id: config.stream_id.clone(), window_index: index, timestamp_ms: start_ms };
        let chain = classify_window(pipeline, &spec, &ctx)?;
        let event = decide(&chain, &config.policy);
        let mut replies = Vec::new();
        if let Some(c) = client.as_deref_mut() {
            for cl in &chain {
                replies.extend(c.send(cl));
            }
        }
        report.local_alerts += usize::from(event.kind == EventKind::Alert);
        report.server_alerts += replies.iter().filter(|r| matches!(r, ServerFrame::Alert { .. })).count();
        let result = WindowResult {
            index,
            start_ms,
            classifications: chain,
            event,
            replies,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_window(&result);
        report.windows.push(result);
        Ok(())
    };

    match source {
        StreamSource::Wav(path) => {
            let clip = read_wav(path).map_err(|e| RuntimeError::Source(format!("{}: {e}", path.display())))?;
            let clip = if clip.sample_rate_hz() == CANONICAL_RATE_HZ || clip.is_empty() {
                clip
            } else {
                resample(&clip, CANONICAL_RATE_HZ).map_err(|e| RuntimeError::Source(e.to_string()))?
            };
            let rate = CANONICAL_RATE_HZ as f64;
            let window = (config.window_s * rate).round() as usize;
            let hop = (config.hop_s * rate).round() as usize;
            for i in 0..window_count(clip.len(), window, hop) {
                let started = Instant::now();
                let start = i * hop;
                let spec = featurize(&clip.window(start, window))?;
                process(i as u64, (start as u64 * 1000) / CANONICAL_RATE_HZ as u64, started, spec)?;
            }
        }
        StreamSource::Features(paths) => {
            for (i, path) in paths.iter().enumerate() {
                let started = Instant::now();
                let spec = read_features(path).map_err(|e| RuntimeError::Source(format!("{}: {e}", path.display())))?;
                process(i as u64, i as u64 * hop_ms, started, spec)?;
            }
        }
    }
    if let Some(c) = client.as_deref_mut() {
        let tail = c.flush();
        report.server_alerts += tail.iter().filter(|r| matches!(r, ServerFrame::Alert { .. })).count();
        report.client = Some(c.stats());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        assert_eq!(window_count(96_000, 48_000, 24_000), 3);
        assert_eq!(window_count(48_000, 48_000, 24_000), 1);
        assert_eq!(window_count(10, 48_000, 24_000), 1);
        assert_eq!(window_count(95_999, 48_000, 24_000), 2);
    }
}
