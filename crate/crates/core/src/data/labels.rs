//! Best-effort label parsing from corpus file names.

use std::collections::HashMap;
use std::path::Path;

use super::{DataError, Result, Valence};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VivaeName {
    pub speaker: String,
    pub emotion: String,
    pub valence: Valence,
}

fn stem(filename: &str) -> Option<&str> {
    let name = Path::new(filename).file_name()?.to_str()?;
    let (stem, ext) = name.rsplit_once('.')?;
    ext.eq_ignore_ascii_case("wav").then_some(stem)
}

/// Parse `speaker_emotion_intensity_index.wav`.
pub fn parse_vivae_name(filename: &str) -> Result<VivaeName> {
    let malformed = || DataError::MalformedName(filename.to_string());
    let stem = stem(filename).ok_or_else(malformed)?;
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() != 4 || parts.iter().any(|p| p.is_empty()) {
        return Err(malformed());
    }
    let emotion = parts[1].to_ascii_lowercase();
    let valence = match emotion.as_str() {
        "achievement" | "pleasure" | "surprise" => Valence::Positive,
        "anger" | "fear" | "pain" => Valence::Negative,
        _ => return Err(DataError::UnrecognizedEmotion(parts[1].to_string())),
    };
    Ok(VivaeName { speaker: parts[0].to_string(), emotion, valence })
}

/// Emotion-code table for hyphen-delimited ASVP-ESD names, loaded from CSV
/// (`code,emotion,is_scream`).
#[derive(Clone, Debug, PartialEq)]
pub struct AsvpCodeTable {
    /// Zero-based position of the emotion code among the hyphen fields.
    pub field: usize,
    codes: HashMap<String, (String, bool)>,
}

const DEFAULT_TABLE: &str = include_str!("../../data/asvp_codes.csv");

impl Default for AsvpCodeTable {
    fn default() -> Self {
        Self::from_csv(DEFAULT_TABLE.as_bytes(), 2).expect("bundled table parses")
    }
}

impl AsvpCodeTable {
    pub fn from_csv<R: std::io::Read>(reader: R, field: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut codes = HashMap::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let bad = |msg: &str| DataError::Parse { row: i + 2, column: "is_scream".into(), msg: msg.into() };
            let (Some(code), Some(emotion), Some(flag)) = (row.get(0), row.get(1), row.get(2)) else {
                return Err(bad("expected code,emotion,is_scream"));
            };
            let is_scream = match flag.trim() {
                "1" => true,
                "0" => false,
                _ => return Err(bad("expected 0 or 1")),
            };
            codes.insert(code.trim().to_string(), (emotion.trim().to_string(), is_scream));
        }
        Ok(AsvpCodeTable { field, codes })
    }

    pub fn load(path: &Path, field: usize) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?, field)
    }
}

/// Emotion name and scream flag for a hyphen-delimited ASVP-ESD file name.
pub fn parse_asvp_name(filename: &str, table: &AsvpCodeTable) -> Result<(String, bool)> {
    let stem = stem(filename).ok_or_else(|| DataError::MalformedName(filename.to_string()))?;
    let fields: Vec<&str> = stem.split('-').collect();
    let code = fields.get(table.field).filter(|_| fields.len() > 1).ok_or_else(|| DataError::MalformedName(filename.to_string()))?;
    table.codes.get(*code).cloned().ok_or_else(|| DataError::UnrecognizedEmotion(code.to_string()))
}
