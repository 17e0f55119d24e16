use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;

use edgekd_core::data::{write_stream_file, SynthKind, Task};
use edgekd_core::dsp::featurize;
use edgekd_core::model::{build_student, Model, ModelConfig};
use edgekd_core::runtime::{
    classify_window, decide, run_stream, spawn_server, AlertSinks, Classification, ClientFrame, DecisionClient,
    DecisionEvent, EventKind, Label, Pipeline, Policy, ServerFrame, StreamConfig, StreamSource, WindowContext,
    MAX_LINE_BYTES,
};

/// Student whose output ignores the input: logits = bias.
fn constant_model(bias: [f32; 2]) -> Model {
    let mut m = build_student(&ModelConfig::student(), 1).unwrap();
    let names: Vec<String> = m.params().keys().cloned().collect();
    for (name, t) in names.iter().zip(m.params_mut()) {
        match name.as_str() {
            "fc3.weight" => t.data_mut().fill(0.0),
            "fc3.bias" => t.data_mut().copy_from_slice(&bias),
            _ => {}
        }
    }
    m
}

fn classification(window: u64, task: Task, label: Label, score: f64) -> Classification {
    Classification {
        stream_id: "s1".into(),
        window_index: window,
        timestamp_ms: window * 1500,
        task,
        label,
        score,
        model_id: "test".into(),
    }
}

struct Raw {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Raw {
    fn connect(addr: std::net::SocketAddr) -> Raw {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(std::time::Duration::from_secs(10))).unwrap();
        Raw { writer: s.try_clone().unwrap(), reader: BufReader::new(s) }
    }

    fn send_line(&mut self, line: &str) -> ServerFrame {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
        let mut reply = String::new();
        self.reader.read_line(&mut reply).unwrap();
        serde_json::from_str(reply.trim_end()).unwrap()
    }

    fn send(&mut self, seq: u64, c: &Classification) -> ServerFrame {
        self.send_line(ClientFrame::from_classification(seq, c).to_line().trim_end())
    }

    fn is_closed(&mut self) -> bool {
        let mut rest = Vec::new();
        matches!(self.reader.read_to_end(&mut rest), Ok(0))
    }
}

fn sink_lines(path: &std::path::Path) -> Vec<DecisionEvent> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn valid_frames_are_acked_with_their_sequence_number() {
    let server = spawn_server("127.0.0.1:0", AlertSinks::default(), Policy::default()).unwrap();
    let mut c = Raw::connect(server.local_addr());
    for seq in [0, 7, 42] {
        let reply = c.send(seq, &classification(seq, Task::Detect, Label::NonScream, 0.9));
        assert_eq!(reply, ServerFrame::ack(seq));
    }
    server.shutdown();
}

#[test]
fn malformed_frames_get_an_error_and_close() {
    let server = spawn_server("127.0.0.1:0", AlertSinks::default(), Policy::default()).unwrap();
    for bad in ["this is not json", "{\"v\":1}", "[1,2,3]"] {
        let mut c = Raw::connect(server.local_addr());
        assert!(matches!(c.send_line(bad), ServerFrame::Error { .. }), "{bad}");
        assert!(c.is_closed());
    }
    let mut c = Raw::connect(server.local_addr());
    let huge = "x".repeat(MAX_LINE_BYTES + 10);
    assert!(matches!(c.send_line(&huge), ServerFrame::Error { .. }));
    assert!(c.is_closed());
    server.shutdown();
}

#[test]
fn negative_scream_alerts_into_the_sink_file() {
    let dir = tempfile::tempdir().unwrap();
    let sink = dir.path().join("alerts.jsonl");
    let sinks = AlertSinks { file: Some(sink.clone()), ..AlertSinks::default() };
    let server = spawn_server("127.0.0.1:0", sinks, Policy::default()).unwrap();
    let mut c = Raw::connect(server.local_addr());
    assert_eq!(c.send(1, &classification(3, Task::Detect, Label::Scream, 0.9)), ServerFrame::ack(1));
    assert_eq!(c.send(2, &classification(3, Task::Type, Label::Negative, 0.8)), ServerFrame::alert(2));
    let events = sink_lines(&sink);
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].kind, EventKind::Alert);
    assert_eq!(events[0].classification.label, Label::Negative);
    assert_eq!(events[0].classification.window_index, 3);
    server.shutdown();
}

#[test]
fn server_alerts_only_on_negative_screams() {
    let dir = tempfile::tempdir().unwrap();
    let sink = dir.path().join("alerts.jsonl");
    let sinks = AlertSinks { file: Some(sink.clone()), ..AlertSinks::default() };
    let server = spawn_server("127.0.0.1:0", sinks, Policy::default()).unwrap();
    let mut c = Raw::connect(server.local_addr());
    let (mut seq, mut window, mut expected) = (0, 0, 0);
    for detect in [Label::Scream, Label::NonScream] {
        for valence in [Label::Positive, Label::Negative] {
            for score in [0.5, 0.75, 1.0] {
                window += 1;
                seq += 1;
                c.send(seq, &classification(window, Task::Detect, detect, 0.9));
                seq += 1;
                let reply = c.send(seq, &classification(window, Task::Type, valence, score));
                let alert = detect == Label::Scream && valence == Label::Negative;
                expected += usize::from(alert);
                assert_eq!(matches!(reply, ServerFrame::Alert { .. }), alert, "{detect:?} {valence:?} {score}");
                assert_eq!(reply.seq(), Some(seq));
            }
        }
    }
    // a valence frame without a scream for its window never alerts
    assert_eq!(c.send(999, &classification(500, Task::Type, Label::Negative, 1.0)), ServerFrame::ack(999));
    assert_eq!(sink_lines(&sink).len(), expected);
    server.shutdown();
}

#[test]
fn concurrent_clients_each_get_one_reply_per_frame() {
    let server = spawn_server("127.0.0.1:0", AlertSinks::default(), Policy::default()).unwrap();
    let addr = server.local_addr();
    let workers: Vec<_> = (0..4u64)
        .map(|k| {
            std::thread::spawn(move || {
                let mut c = Raw::connect(addr);
                for i in 0..50u64 {
                    let mut cl = classification(i, Task::Detect, Label::Scream, 0.7);
                    cl.stream_id = format!("worker-{k}");
                    c.send(2 * i, &cl);
                    cl.task = Task::Type;
                    cl.label = Label::Negative;
                    let reply = c.send(2 * i + 1, &cl);
                    assert_eq!(reply, ServerFrame::alert(2 * i + 1));
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    server.shutdown();
}

#[test]
fn client_buffers_then_drops_oldest_and_recovers() {
    let server = spawn_server("127.0.0.1:0", AlertSinks::default(), Policy::default()).unwrap();
    let addr = server.local_addr();
    server.shutdown();

    let mut client = DecisionClient::new(addr.to_string(), 1000);
    for i in 0..1005 {
        assert!(client.send(&classification(i, Task::Detect, Label::NonScream, 0.9)).is_empty());
    }
    let stats = client.stats();
    assert_eq!((stats.dropped, stats.buffered, stats.sent), (5, 1000, 0));

    let server = spawn_server(&addr.to_string(), AlertSinks::default(), Policy::default()).unwrap();
    let replies = client.flush();
    assert_eq!(replies.len(), 1000);
    // the five oldest frames (seq 0..5) were the ones dropped
    assert_eq!(replies[0].seq(), Some(5));
    assert!(replies.windows(2).all(|w| w[0].seq() < w[1].seq()));
    let stats = client.stats();
    assert_eq!((stats.sent, stats.acks, stats.buffered, stats.dropped), (1000, 1000, 0, 5));
    server.shutdown();
}

#[test]
fn tie_goes_to_non_scream() {
    let pipeline = Pipeline::new(constant_model([0.0, 0.0]), constant_model([0.0, 0.0]));
    let spec = featurize(&edgekd_core::audio::AudioClip::silence(48_000, 16_000)).unwrap();
    let ctx = WindowContext { stream_id: "t".into(), window_index: 0, timestamp_ms: 0 };
    let chain = classify_window(&pipeline, &spec, &ctx).unwrap();
    assert_eq!(chain.len(), 1);
    assert_eq!(chain[0].label, Label::NonScream);
    assert!((chain[0].score - 0.5).abs() < 1e-9);
    assert_eq!(decide(&chain, &Policy::default()).kind, EventKind::Log);
}

#[test]
fn second_stage_runs_only_for_screams() {
    let spec = featurize(&edgekd_core::audio::AudioClip::silence(48_000, 16_000)).unwrap();
    let ctx = WindowContext { stream_id: "t".into(), window_index: 0, timestamp_ms: 0 };
    let screams = Pipeline::new(constant_model([-3.0, 3.0]), constant_model([-2.0, 2.0]));
    let chain = classify_window(&screams, &spec, &ctx).unwrap();
    assert_eq!(chain.iter().map(|c| c.label).collect::<Vec<_>>(), vec![Label::Scream, Label::Negative]);
    assert!(chain.iter().all(|c| c.score > 0.5 && c.score <= 1.0));
    assert_eq!(decide(&chain, &Policy::default()).kind, EventKind::Alert);

    let quiet = Pipeline::new(constant_model([3.0, -3.0]), constant_model([-2.0, 2.0]));
    assert_eq!(classify_window(&quiet, &spec, &ctx).unwrap().len(), 1);

    let mut raw = spec.clone();
    raw.normalized = false;
    assert!(classify_window(&screams, &raw, &ctx).is_err());
}

#[test]
fn stream_windows_gating_and_server_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("six_seconds.wav");
    write_stream_file(&wav, &[SynthKind::ScreamNegative, SynthKind::NonScream], 1).unwrap();
    let sink = dir.path().join("alerts.jsonl");
    let server = spawn_server(
        "127.0.0.1:0",
        AlertSinks { file: Some(sink.clone()), ..AlertSinks::default() },
        Policy::default(),
    )
    .unwrap();

    // random, untrained models: whatever they say, the invariants hold
    let random = Pipeline::new(
        build_student(&ModelConfig::student(), 11).unwrap(),
        build_student(&ModelConfig::student(), 12).unwrap(),
    );
    let always = Pipeline::new(constant_model([-3.0, 3.0]), constant_model([-2.0, 2.0]));
    for pipeline in [&random, &always] {
        let mut client = DecisionClient::new(server.local_addr().to_string(), 1000);
        let mut seen = 0;
        let report = run_stream(
            &StreamSource::Wav(wav.clone()),
            pipeline,
            &StreamConfig::default(),
            Some(&mut client),
            |_| seen += 1,
        )
        .unwrap();
        assert_eq!(report.windows.len(), 3);
        assert_eq!(seen, 3);
        let all: Vec<&Classification> = report.windows.iter().flat_map(|w| &w.classifications).collect();
        let detect = all.iter().filter(|c| c.task == Task::Detect).count();
        let typed = all.iter().filter(|c| c.task == Task::Type).count();
        assert!(typed <= detect);
        let frames: usize = report.windows.iter().map(|w| w.classifications.len()).sum();
        let replies: usize = report.windows.iter().map(|w| w.replies.len()).sum();
        assert_eq!(frames, replies);
        assert_eq!(report.local_alerts, report.server_alerts);
        assert_eq!(report.windows.iter().map(|w| w.start_ms).collect::<Vec<_>>(), vec![0, 1500, 3000]);
    }
    let always_alerts = 3;
    assert!(sink_lines(&sink).len() >= always_alerts);
    server.shutdown();
}

#[test]
fn missing_source_is_a_source_error() {
    let pipeline = Pipeline::new(constant_model([0.0, 0.0]), constant_model([0.0, 0.0]));
    let err = run_stream(
        &StreamSource::Wav("/nonexistent/file.wav".into()),
        &pipeline,
        &StreamConfig::default(),
        None,
        |_| {},
    )
    .unwrap_err();
    assert!(matches!(err, edgekd_core::runtime::RuntimeError::Source(_)));
}
