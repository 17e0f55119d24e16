//! Text tables in the row layout of the published result tables, annotated
//! with the published reference values, plus CSV series for plotting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LatencyReport, Result, SizeReport};
use crate::data::Task;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefAccuracy {
    pub model: String,
    pub detect: f64,
    #[serde(rename = "type")]
    pub type_: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefNoise {
    pub category: String,
    pub detect: f64,
    #[serde(rename = "type")]
    pub type_: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefSize {
    pub model: String,
    pub params: u64,
    pub mb: f64,
}

/// Published reference numbers, including rows for a model (MobileNetV3s)
/// that is not implemented here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub accuracy_clean: Vec<RefAccuracy>,
    pub accuracy_noisy: Vec<RefAccuracy>,
    pub student_noise_categories: Vec<RefNoise>,
    pub size: Vec<RefSize>,
}

impl Default for Reference {
    fn default() -> Self {
        serde_json::from_str(include_str!("../../data/reference.json")).expect("bundled reference parses")
    }
}

fn pick(detect: f64, type_: f64, task: Task) -> f64 {
    match task {
        Task::Detect => detect,
        Task::Type => type_,
    }
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Detect => "Scream Detection",
        Task::Type => "Scream Type Classification",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub task: Task,
    pub accuracy_pct: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.2}"))
}

/// Model | Task | Accuracy | Reference. `noisy` selects the noisy
/// reference column.
pub fn accuracy_table(rows: &[AccuracyRow], reference: &Reference, noisy: bool) -> String {
    let refs = if noisy { &reference.accuracy_noisy } else { &reference.accuracy_clean };
    let mut out = String::new();
    let _ = writeln!(out, "{:<14} {:<28} {:>9} {:>10}", "Model", "Task", "Accuracy", "Reference");
    for r in rows {
        let published = refs.iter().find(|p| p.model == r.model).map(|p| pick(p.detect, p.type_, r.task));
        let _ = writeln!(
            out,
            "{:<14} {:<28} {:>9.2} {:>10}",
            r.model,
            task_name(r.task),
            r.accuracy_pct,
            fmt_opt(published)
        );
    }
    for p in refs.iter().filter(|p| !rows.iter().any(|r| r.model == p.model)) {
        for task in [Task::Detect, Task::Type] {
            let _ = writeln!(
                out,
                "{:<14} {:<28} {:>9} {:>10.2}",
                p.model,
                task_name(task),
                "-",
                pick(p.detect, p.type_, task)
            );
        }
    }
    out
}

/// Task | Noise Type | Accuracy | Reference (student per-category rows).
pub fn noise_table(task: Task, per_category: &[(String, f64)], reference: &Reference) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:<10} {:>9} {:>10}", "Task", "Noise Type", "Accuracy", "Reference");
    for (cat, acc) in per_category {
        let published = reference
            .student_noise_categories
            .iter()
            .find(|p| p.category == *cat)
            .map(|p| pick(p.detect, p.type_, task));
        let _ = writeln!(out, "{:<28} {:<10} {:>9.2} {:>10}", task_name(task), cat, acc, fmt_opt(published));
    }
    out
}

/// Model | Total Parameters | Size (MiB) | reference columns.
pub fn size_table(rows: &[(String, SizeReport)], reference: &Reference) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>16} {:>10} {:>16} {:>10}",
        "Model", "Total Params", "Size MiB", "Ref Params", "Ref MiB"
    );
    for (name, s) in rows {
        let published = reference.size.iter().find(|p| p.model == *name);
        let _ = writeln!(
            out,
            "{:<14} {:>16} {:>10.3} {:>16} {:>10}",
            name,
            s.trainable_params,
            s.mib,
            published.map_or("-".into(), |p| p.params.to_string()),
            published.map_or("-".into(), |p| format!("{:.3}", p.mb))
        );
    }
    out
}

/// Model | mean load ms | mean forward ms.
pub fn latency_table(rows: &[(String, Option<&LatencyReport>, Option<&LatencyReport>)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<14} {:>14} {:>14}", "Model", "Load ms", "Forward ms");
    for (name, load, fwd) in rows {
        let l = load.and_then(|r| r.load_ms.as_ref()).map(|s| s.mean);
        let f = fwd.and_then(|r| r.forward_ms.as_ref()).map(|s| s.mean);
        let _ = writeln!(out, "{:<14} {:>14} {:>14}", name, fmt_opt(l), fmt_opt(f));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub label: String,
    pub value: f64,
}

/// CSV with columns `series,label,value`.
pub fn write_plot_data(path: &Path, points: &[PlotPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series", "label", "value"])?;
    for p in points {
        w.serialize((&p.series, &p.label, p.value))?;
    }
    w.flush()?;
    Ok(())
}
