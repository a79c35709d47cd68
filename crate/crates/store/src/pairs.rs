//! CSV pairs files with header `pair_id,path1,path2,label,fold`.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xverify_core::confidence::{Label, FOLDS};

use crate::is_safe_name;

pub const HEADER: [&str; 5] = ["pair_id", "path1", "path2", "label", "fold"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Genuine,
    Imposter,
    /// Field data without ground truth.
    Unknown,
}

impl PairLabel {
    pub fn known(self) -> Option<Label> {
        match self {
            PairLabel::Genuine => Some(Label::Genuine),
            PairLabel::Imposter => Some(Label::Imposter),
            PairLabel::Unknown => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairLabel::Genuine => "genuine",
            PairLabel::Imposter => "imposter",
            PairLabel::Unknown => "unknown",
        }
    }
}

impl From<Label> for PairLabel {
    fn from(label: Label) -> Self {
        match label {
            Label::Genuine => PairLabel::Genuine,
            Label::Imposter => PairLabel::Imposter,
        }
    }
}

impl fmt::Display for PairLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "genuine" => Ok(PairLabel::Genuine),
            "imposter" | "impostor" => Ok(PairLabel::Imposter),
            "unknown" => Ok(PairLabel::Unknown),
            other => Err(format!("unknown label {other:?}, expected genuine|imposter|unknown")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub path1: PathBuf,
    pub path2: PathBuf,
    pub label: PairLabel,
    pub fold: u8,
    pub dataset: String,
}

#[derive(Debug, Error)]
pub enum PairsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("line {line}: duplicate pair_id {pair_id:?} (first seen on line {first_line})")]
    Duplicate { line: u64, pair_id: String, first_line: u64 },
    #[error("line {line}: label unknown cannot be mixed with genuine/imposter labels")]
    MixedLabels { line: u64 },
    #[error("invalid dataset name {0:?}")]
    DatasetName(String),
}

/// Dataset name implied by a pairs file: its file stem.
pub fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_owned()
}

/// Loads a pairs file. Relative image paths are resolved against the file's
/// directory; images are not opened here.
pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PairRecord>, PairsError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| PairsError::Io {
        path: path.to_owned(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_pairs(file, &dataset_name(path), base)
}

pub fn parse_pairs(reader: impl io::Read, dataset: &str, base: &Path) -> Result<Vec<PairRecord>, PairsError> {
    if !is_safe_name(dataset) {
        return Err(PairsError::DatasetName(dataset.to_owned()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader);

    let mut records = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut header_seen = false;
    let mut labelled: Option<bool> = None;
    for row in rdr.records() {
        let row = row.map_err(|e| PairsError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let parse = |reason: String| PairsError::Parse { line, reason };
        if !header_seen {
            let fields: Vec<&str> = row.iter().collect();
            if fields != HEADER {
                return Err(parse(format!("expected header {:?}, got {fields:?}", HEADER.join(","))));
            }
            header_seen = true;
            continue;
        }
        if row.len() != HEADER.len() {
            return Err(parse(format!("expected {} fields, got {}", HEADER.len(), row.len())));
        }
        let pair_id = &row[0];
        if !is_safe_name(pair_id) {
            return Err(parse(format!(
                "pair_id {pair_id:?} must be 1-128 characters from [A-Za-z0-9._-]"
            )));
        }
        if row[1].is_empty() || row[2].is_empty() {
            return Err(parse("empty image path".into()));
        }
        let label: PairLabel = row[3].parse().map_err(parse)?;
        let fold = match (&row[4], label) {
            ("", PairLabel::Unknown) => 0,
            (s, _) => {
                let fold: i64 = s.parse().map_err(|_| parse(format!("fold {s:?} is not an integer")))?;
                if !(0..FOLDS as i64).contains(&fold) {
                    return Err(parse(format!("fold out of range [0,{}]", FOLDS - 1)));
                }
                fold as u8
            }
        };
        let is_labelled = label != PairLabel::Unknown;
        if *labelled.get_or_insert(is_labelled) != is_labelled {
            return Err(PairsError::MixedLabels { line });
        }
        if let Some(&first_line) = seen.get(pair_id) {
            return Err(PairsError::Duplicate {
                line,
                pair_id: pair_id.to_owned(),
                first_line,
            });
        }
        seen.insert(pair_id.to_owned(), line);
        records.push(PairRecord {
            pair_id: pair_id.to_owned(),
            path1: base.join(&row[1]),
            path2: base.join(&row[2]),
            label,
            fold,
            dataset: dataset.to_owned(),
        });
    }
    if !header_seen {
        return Err(PairsError::Parse {
            line: 1,
            reason: "missing header".into(),
        });
    }
    Ok(records)
}

/// Writes pairs in the format read by [`load_pairs`], with paths as given.
pub fn write_pairs(path: impl AsRef<Path>, pairs: &[PairRecord]) -> Result<(), PairsError> {
    let path = path.as_ref();
    let io_err = |e: csv::Error| PairsError::Io {
        path: path.to_owned(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(HEADER).map_err(io_err)?;
    for p in pairs {
        w.write_record([
            p.pair_id.as_str(),
            &p.path1.to_string_lossy(),
            &p.path2.to_string_lossy(),
            p.label.as_str(),
            &p.fold.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|source| PairsError::Io {
        path: path.to_owned(),
        source,
    })
}
