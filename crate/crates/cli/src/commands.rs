use std::path::{Path, PathBuf};

use edgekd_core::audio::{read_wav, write_wav, CANONICAL_RATE_HZ};
use edgekd_core::data::{
    balance_binary, build_noise_bank, load_manifest, split, synth_dataset, synth_noise_bank, write_stream_file,
    Manifest, SynthKind, NOISE_CATEGORIES,
};
use edgekd_core::dsp::{featurize, write_features};
use edgekd_core::eval::{
    accuracy_table, bench_forward, bench_load, evaluate, evaluate_noisy, export_embeddings, latency_table,
    noise_table, size_report, size_table, write_plot_data, AccuracyRow, PlotPoint, Reference,
};
use edgekd_core::model::{load_model, save_model, Model, ModelError};
use edgekd_core::runtime::{
    classify_window, decide, run_stream, spawn_server, AlertSinks, DecisionClient, EventKind, Pipeline, StreamConfig,
    StreamSource, WindowContext, WindowResult,
};
use edgekd_core::seed;
use edgekd_core::train::{distill_with, train_teacher_with, EpochRecord, TrainHistory};
use serde::Serialize;
use serde_json::json;

use crate::{Cli, CliError, Command, SplitArg, Settings};

struct Out {
    json: bool,
}

impl Out {
    /// JSON on stdout with `--json`, the human rendering otherwise.
    fn emit(&self, value: &impl Serialize, human: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string(value).expect("output serializes"));
        } else {
            print!("{}", human());
        }
    }
}

pub(crate) fn execute(cli: &Cli, s: &Settings) -> Result<(), CliError> {
    let out = Out { json: cli.json };
    match &cli.command {
        Command::Featurize(a) => featurize_files(&out, &a.input, &a.out),
        Command::SynthData(a) => synth(&out, s, a.n, &a.out),
        Command::TrainTeacher(a) => {
            let clips = select(&a.data.manifest, s, SplitArg::Train)?.load_clips(s.data.task)?;
            let (model, history) = train_teacher_with(&clips, &s.hyperparams(), &mut log_epoch)?;
            save_model(&model, &a.out)?;
            report_training(&out, &model, &history, &a.out);
            Ok(())
        }
        Command::Distill(a) => {
            let teacher = load(&a.teacher)?;
            let clips = select(&a.data.manifest, s, SplitArg::Train)?.load_clips(s.data.task)?;
            let (model, history) = distill_with(&teacher, &clips, &s.hyperparams(), &mut log_epoch)?;
            save_model(&model, &a.out)?;
            report_training(&out, &model, &history, &a.out);
            Ok(())
        }
        Command::Eval(a) => eval(&out, s, &a.model, &a.data.manifest, a.split, a.noise_dir.as_deref()),
        Command::Bench(a) => bench(&out, s, &a.model, a.plot_data.as_deref()),
        Command::Embed(a) => {
            let model = load(&a.model)?;
            let records = select(&a.data.manifest, s, a.split)?;
            let rows = export_embeddings(&model, &records, s.data.task, &a.out)?;
            let labels = edgekd_core::eval::labels_path(&a.out);
            out.emit(&json!({"rows": rows, "cols": model.config.embedding_width(), "out": a.out, "labels": labels}), || {
                format!("wrote {rows} embeddings to {} (labels: {})\n", a.out.display(), labels.display())
            });
            Ok(())
        }
        Command::Infer(a) => {
            let pipeline = load_pipeline(&a.pipeline.detector, &a.pipeline.typer)?;
            for input in &a.input {
                let clip = read_wav(input).map_err(|e| edgekd_core::runtime::RuntimeError::Source(format!("{}: {e}", input.display())))?;
                let spec = featurize(&clip)?;
                let ctx = WindowContext { stream_id: input.display().to_string(), window_index: 0, timestamp_ms: 0 };
                let chain = classify_window(&pipeline, &spec, &ctx)?;
                let event = decide(&chain, &s.decision.policy);
                out.emit(&json!({"input": input, "classifications": chain, "event": event}), || {
                    format!("{}: {} -> {:?}\n", input.display(), describe_chain(&chain), event.kind)
                });
            }
            Ok(())
        }
        Command::Stream(a) => {
            let pipeline = load_pipeline(&a.pipeline.detector, &a.pipeline.typer)?;
            let source = match (&a.input, &a.features) {
                (Some(wav), _) => StreamSource::Wav(wav.clone()),
                (None, Some(files)) => StreamSource::Features(files.clone()),
                (None, None) => return Err(CliError::Usage("--input or --features is required".into())),
            };
            let config = StreamConfig {
                stream_id: a.stream_id.clone(),
                window_s: s.stream.window_s,
                hop_s: s.stream.hop_s,
                policy: s.decision.policy.clone(),
            };
            let mut client = a.endpoint.as_ref().map(|e| DecisionClient::new(e.clone(), s.stream.buffer_cap));
            let report = run_stream(&source, &pipeline, &config, client.as_mut(), |w| print_window(&out, w))?;
            let summary = json!({
                "stream_id": report.stream_id,
                "windows": report.windows.len(),
                "local_alerts": report.local_alerts,
                "server_alerts": report.server_alerts,
                "client": report.client,
            });
            out.emit(&summary, || {
                let mut line = format!(
                    "{} windows, {} local alert(s), {} server alert(s)",
                    report.windows.len(),
                    report.local_alerts,
                    report.server_alerts
                );
                if let Some(c) = &report.client {
                    line += &format!(", sent {}, dropped {}, buffered {}", c.sent, c.dropped, c.buffered);
                }
                line + "\n"
            });
            Ok(())
        }
        Command::Serve(_) => {
            let sinks = AlertSinks {
                file: s.decision.sink.clone(),
                stdout: s.decision.stdout,
                webhook: s.decision.webhook.clone(),
            };
            let handle = spawn_server(&s.decision.bind, sinks, s.decision.policy.clone())?;
            eprintln!("listening on {}", handle.local_addr());
            handle.wait();
            Ok(())
        }
    }
}

fn log_epoch(r: &EpochRecord) {
    let val = match (r.val_acc, r.val_loss) {
        (Some(a), Some(l)) => format!(" val_acc {a:.4} val_loss {l:.4}"),
        _ => String::new(),
    };
    eprintln!("epoch {:>3}: loss {:.4} train_acc {:.4}{val} ({:.0} ms)", r.epoch, r.loss, r.train_acc, r.wall_ms);
}

fn report_training(out: &Out, model: &Model, history: &TrainHistory, path: &Path) {
    let last = history.epochs.last();
    let summary = json!({
        "model": path,
        "model_id": model.model_id(),
        "kind": model.kind().as_str(),
        "epochs": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "final_train_acc": last.map(|e| e.train_acc),
        "final_loss": last.map(|e| e.loss),
    });
    out.emit(&summary, || {
        format!(
            "saved {} ({} epochs, final train_acc {:.4}) to {}\n",
            model.kind().as_str(),
            history.epochs.len(),
            last.map_or(0.0, |e| e.train_acc),
            path.display()
        )
    });
}

/// Task-labeled records, balanced if configured, then the requested side
/// of the seeded stratified split. Same manifest and seed give the same
/// records in every command.
fn select(manifest: &Path, s: &Settings, which: SplitArg) -> Result<Manifest, CliError> {
    let task = s.data.task;
    let mut m = load_manifest(manifest)?.labeled(task);
    if s.data.balance {
        m = balance_binary(&m, task, &mut seed::rng(s.seed, "balance"))?;
    }
    if which == SplitArg::All || s.data.train_fraction >= 1.0 {
        if which == SplitArg::Test && s.data.train_fraction >= 1.0 {
            return Err(CliError::Usage("no test split when the train fraction is 1".into()));
        }
        return Ok(m);
    }
    let (train, test) = split(&m, s.data.train_fraction, seed::sub_seed(s.seed, "split"), Some(task))?;
    Ok(if which == SplitArg::Train { train } else { test })
}

fn featurize_files(out: &Out, inputs: &[PathBuf], dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    for input in inputs {
        let clip = read_wav(input).map_err(|e| edgekd_core::runtime::RuntimeError::Source(format!("{}: {e}", input.display())))?;
        let spec = featurize(&clip)?;
        let stem = input.file_stem().map_or("features".into(), |s| s.to_string_lossy().into_owned());
        let path = dir.join(format!("{stem}.melf"));
        write_features(&spec, &path)?;
        written.push(json!({"input": input, "out": path, "rows": spec.rows, "cols": spec.cols}));
    }
    out.emit(&written, || format!("wrote {} feature file(s) to {}\n", written.len(), dir.display()));
    Ok(())
}

fn synth(out: &Out, s: &Settings, n: usize, dir: &Path) -> Result<(), CliError> {
    let manifest = synth_dataset(n, seed::sub_seed(s.seed, "synth"), dir)?;
    let scream = dir.join("stream_scream.wav");
    let background = dir.join("stream_background.wav");
    write_stream_file(&scream, &[SynthKind::ScreamNegative, SynthKind::ScreamNegative], seed::sub_seed(s.seed, "stream-scream"))?;
    write_stream_file(&background, &[SynthKind::NonScream, SynthKind::NonScream], seed::sub_seed(s.seed, "stream-background"))?;
    let noise_dir = dir.join("noise");
    let bank = synth_noise_bank(&NOISE_CATEGORIES, 6.0, seed::sub_seed(s.seed, "noise-bank"));
    for (cat, clips) in &bank.categories {
        let cat_dir = noise_dir.join(cat);
        std::fs::create_dir_all(&cat_dir).map_err(|source| CliError::Io { path: cat_dir.clone(), source })?;
        for (i, clip) in clips.iter().enumerate() {
            debug_assert_eq!(clip.sample_rate_hz(), CANONICAL_RATE_HZ);
            let path = cat_dir.join(format!("{cat}_{i}.wav"));
            write_wav(&path, clip).map_err(|e| CliError::Data(edgekd_core::data::DataError::Audio { path, source: e }))?;
        }
    }
    let summary = json!({
        "records": manifest.len(),
        "manifest": dir.join("manifest.csv"),
        "stream_scream": scream,
        "stream_background": background,
        "noise_dir": noise_dir,
    });
    out.emit(&summary, || {
        format!(
            "wrote {} clips and manifest.csv, stream_scream.wav, stream_background.wav and noise/ to {}\n",
            manifest.len(),
            dir.display()
        )
    });
    Ok(())
}

fn eval(
    out: &Out,
    s: &Settings,
    model_path: &Path,
    manifest: &Path,
    which: SplitArg,
    noise_dir: Option<&Path>,
) -> Result<(), CliError> {
    let model = load(model_path)?;
    let task = s.data.task;
    let records = select(manifest, s, which)?;
    let clean = evaluate(&model, &records, task)?;
    let noisy = match noise_dir {
        Some(dir) => {
            let bank = build_noise_bank(dir, &s.noise.categories)?;
            Some(evaluate_noisy(&model, &records, task, &bank, &s.noise.categories, &s.noise.policy(), s.seed)?)
        }
        None => None,
    };
    let summary = json!({
        "model": model_path,
        "kind": model.kind().as_str(),
        "task": task,
        "split": format!("{which:?}").to_lowercase(),
        "accuracy": clean.accuracy,
        "n": clean.n,
        "confusion": clean.confusion,
        "noisy": noisy.as_ref().map(|r| json!({"pooled": r.pooled, "per_category": r.per_category})),
    });
    out.emit(&summary, || {
        let reference = Reference::default();
        let kind = model.kind().as_str().to_string();
        let mut text = format!("accuracy {:.2}% on {} records\n", clean.accuracy_pct(), clean.n);
        let c = clean.confusion;
        text += &format!("confusion (truth x predicted): [[{}, {}], [{}, {}]]\n", c[0][0], c[0][1], c[1][0], c[1][1]);
        let row = AccuracyRow { model: kind.clone(), task, accuracy_pct: clean.accuracy_pct() };
        text += &accuracy_table(&[row], &reference, false);
        if let Some(r) = &noisy {
            let per: Vec<(String, f64)> = r.per_category.iter().map(|(k, m)| (k.clone(), m.accuracy_pct())).collect();
            text += &format!("\nnoisy test accuracy {:.2}% (pooled)\n", r.pooled.accuracy_pct());
            text += &noise_table(task, &per, &reference);
            let row = AccuracyRow { model: kind, task, accuracy_pct: r.pooled.accuracy_pct() };
            text += &accuracy_table(&[row], &reference, true);
        }
        text
    });
    Ok(())
}

fn bench(out: &Out, s: &Settings, models: &[PathBuf], plot: Option<&Path>) -> Result<(), CliError> {
    let mut reports = Vec::new();
    let mut sizes = Vec::new();
    for path in models {
        let model = load(path)?;
        let load = bench_load(path, s.bench.trials, s.bench.warmup)?;
        let shape = [1, model.config.in_channels, 128, 188];
        let mut report = bench_forward(&model, &shape, s.bench.trials, s.bench.warmup)?;
        report.load_ms = load.load_ms;
        // reports always go to stdout as JSON; the table is a stderr extra
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
        sizes.push((model.kind().as_str().to_string(), size_report(&model)?));
        reports.push((model.kind().as_str().to_string(), report));
    }
    if !out.json {
        let rows: Vec<_> = reports.iter().map(|(n, r)| (n.clone(), Some(r), Some(r))).collect();
        eprint!("{}", latency_table(&rows));
        eprint!("{}", size_table(&sizes, &Reference::default()));
    }
    if let Some(path) = plot {
        let mut points = Vec::new();
        for (name, r) in &reports {
            if let Some(l) = &r.load_ms {
                points.push(PlotPoint { series: "load_ms".into(), label: name.clone(), value: l.mean });
            }
            if let Some(f) = &r.forward_ms {
                points.push(PlotPoint { series: "forward_ms".into(), label: name.clone(), value: f.mean });
            }
        }
        write_plot_data(path, &points)?;
    }
    Ok(())
}

/// Load a model file; I/O failures name the file.
fn load(path: &Path) -> Result<Model, CliError> {
    load_model(path).map_err(|e| match e {
        ModelError::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        e => e.into(),
    })
}

fn load_pipeline(detector: &Path, typer: &Path) -> Result<Pipeline, CliError> {
    Ok(Pipeline::new(load(detector)?, load(typer)?))
}

fn describe_chain(chain: &[edgekd_core::runtime::Classification]) -> String {
    chain.iter().map(|c| format!("{} {:.3}", c.label.as_str(), c.score)).collect::<Vec<_>>().join(" -> ")
}

fn print_window(out: &Out, w: &WindowResult) {
    out.emit(w, || {
        let flag = if w.event.kind == EventKind::Alert { " [ALERT]" } else { "" };
        format!(
            "window {:>3} @ {:>7} ms: {}{flag} ({:.1} ms)\n",
            w.index,
            w.start_ms,
            describe_chain(&w.classifications),
            w.wall_ms
        )
    });
}
