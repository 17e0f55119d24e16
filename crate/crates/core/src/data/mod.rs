//! Dataset ingestion: manifests, label parsing, balancing, splitting, noise
//! mixing and the synthetic fallback corpus.

mod labels;
mod noise;
mod sampling;
mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError};
use crate::train::LabeledClip;

pub use labels::{parse_asvp_name, parse_vivae_name, AsvpCodeTable, VivaeName};
pub use noise::{
    build_noise_bank, mix_noise, mix_noise_detailed, synth_noise_bank, MixOutcome, NoiseBank, SnrPolicy,
    NOISE_CATEGORIES,
};
pub use sampling::{balance_binary, split};
pub use synth::{synth_clip, synth_dataset, write_stream_file, SynthKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest row {row}, column {column}: {msg}")]
    Parse { row: usize, column: String, msg: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("unrecognized emotion {0:?}")]
    UnrecognizedEmotion(String),
    #[error("malformed file name {0:?}")]
    MalformedName(String),
    #[error("class {0} has no records")]
    EmptyClass(String),
    #[error("need at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("noise clip of {noise} samples is shorter than the {clip}-sample clip")]
    NoiseTooShort { noise: usize, clip: usize },
    #[error("sample rates differ: clip {clip} Hz, noise {noise} Hz")]
    RateMismatch { clip: u32, noise: u32 },
    #[error("noise category {0:?} missing or empty")]
    MissingCategory(String),
    #[error("record {0} has no label for this task")]
    Unlabeled(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Audio { path: PathBuf, source: AudioError },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Asvp,
    Vivae,
    Synthetic,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Asvp => "asvp",
            Dataset::Vivae => "vivae",
            Dataset::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Valence {
    Positive,
    Negative,
}

/// The two classification tasks. Class index 1 is the alert-relevant class
/// (scream, negative valence).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Type,
}

impl Task {
    pub fn class_names(self) -> [&'static str; 2] {
        match self {
            Task::Detect => ["non_scream", "scream"],
            Task::Type => ["positive", "negative"],
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "detect" => Ok(Task::Detect),
            "type" => Ok(Task::Type),
            _ => Err(format!("unknown task {s:?} (expected detect or type)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SampleRecord {
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub path: String,
    pub dataset: Dataset,
    pub is_scream: Option<bool>,
    pub valence: Option<Valence>,
    pub speaker: Option<String>,
}

impl SampleRecord {
    pub fn label(&self, task: Task) -> Option<usize> {
        match task {
            Task::Detect => self.is_scream.map(usize::from),
            Task::Type => self.valence.map(|v| usize::from(v == Valence::Negative)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    /// Directory relative record paths are resolved against.
    pub root: PathBuf,
}

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    path: String,
    dataset: String,
    is_scream: String,
    valence: String,
    speaker: String,
}

fn parse_row(row: Row, line: usize) -> Result<SampleRecord> {
    let err = |column: &str, msg: String| DataError::Parse { row: line, column: column.into(), msg };
    if row.path.trim().is_empty() {
        return Err(err("path", "empty path".into()));
    }
    let dataset = match row.dataset.trim() {
        "asvp" => Dataset::Asvp,
        "vivae" => Dataset::Vivae,
        "synthetic" => Dataset::Synthetic,
        other => return Err(err("dataset", format!("unknown dataset {other:?}"))),
    };
    let is_scream = match row.is_scream.trim() {
        "1" => Some(true),
        "0" => Some(false),
        "" => None,
        other => return Err(err("is_scream", format!("expected 0, 1 or empty, got {other:?}"))),
    };
    let valence = match row.valence.trim() {
        "pos" => Some(Valence::Positive),
        "neg" => Some(Valence::Negative),
        "" => None,
        other => return Err(err("valence", format!("expected pos, neg or empty, got {other:?}"))),
    };
    if dataset == Dataset::Vivae && valence.is_none() {
        return Err(err("valence", "vivae records need a valence".into()));
    }
    let speaker = Some(row.speaker.trim().to_string()).filter(|s| !s.is_empty());
    Ok(SampleRecord { path: row.path, dataset, is_scream, valence, speaker })
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>, root: impl Into<PathBuf>) -> Self {
        Manifest { records, root: root.into() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Records labeled for `task`, in order.
    pub fn labeled(&self, task: Task) -> Manifest {
        let records = self.records.iter().filter(|r| r.label(task).is_some()).cloned().collect();
        Manifest { records, root: self.root.clone() }
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R, root: impl Into<PathBuf>) -> Result<Manifest> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(reader);
        let expected = ["path", "dataset", "is_scream", "valence", "speaker"];
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(DataError::Parse {
                row: 1,
                column: "header".into(),
                msg: format!("expected {}, got {}", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| DataError::Parse { row: line, column: "*".into(), msg: e.to_string() })?;
            let rec = parse_row(row, line)?;
            if !seen.insert(rec.path.clone()) {
                return Err(DataError::Parse { row: line, column: "path".into(), msg: format!("duplicate path {}", rec.path) });
            }
            records.push(rec);
        }
        Ok(Manifest { records, root: root.into() })
    }

    pub fn to_csv_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(Row {
                path: r.path.clone(),
                dataset: r.dataset.as_str().into(),
                is_scream: r.is_scream.map_or(String::new(), |s| if s { "1".into() } else { "0".into() }),
                valence: match r.valence {
                    Some(Valence::Positive) => "pos".into(),
                    Some(Valence::Negative) => "neg".into(),
                    None => String::new(),
                },
                speaker: r.speaker.clone().unwrap_or_default(),
            })?;
        }
        if self.records.is_empty() {
            w.write_record(["path", "dataset", "is_scream", "valence", "speaker"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }

    /// Decode every record's audio, canonicalized, with its `task` label.
    pub fn load_clips(&self, task: Task) -> Result<Vec<LabeledClip>> {
        self.records
            .iter()
            .map(|r| {
                let label = r.label(task).ok_or_else(|| DataError::Unlabeled(r.path.clone()))?;
                let path = self.resolve(r);
                let clip = audio::read_wav(&path)
                    .and_then(|c| audio::canonicalize(&c))
                    .map_err(|source| DataError::Audio { path, source })?;
                Ok(LabeledClip { clip, label })
            })
            .collect()
    }
}

/// Load a manifest CSV; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    Manifest::from_csv_reader(file, root)
}

/// Like [`load_manifest`], additionally requiring every referenced file to
/// exist.
pub fn load_manifest_strict(path: &Path) -> Result<Manifest> {
    let m = load_manifest(path)?;
    if let Some(r) = m.records.iter().find(|r| !m.resolve(r).is_file()) {
        return Err(DataError::MissingFile(m.resolve(r)));
    }
    Ok(m)
}
