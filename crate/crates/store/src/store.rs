//! Read side of the results store: listing, filtering, paging and the
//! decision log.

use std::cmp::Ordering;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;
use xverify_core::confidence::Label;

use crate::pairs::PairLabel;
use crate::record::{Artifact, DecisionRecord, ResultRecord};
use crate::is_safe_name;

pub const INDEX_FILE: &str = "index.jsonl";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const MAX_PER_PAGE: usize = 500;
pub const DEFAULT_PER_PAGE: usize = 50;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("{0} not found")]
    NotFound(String),
    #[error("pair {pair_id:?} exists in several stores ({candidates}); pass dataset and model")]
    Ambiguous { pair_id: String, candidates: String },
    #[error("{0}")]
    InvalidArgument(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultFilter {
    pub dataset: Option<String>,
    pub model: Option<String>,
    pub label: Option<PairLabel>,
    pub prediction: Option<Label>,
    pub correct: Option<bool>,
    pub c_min: Option<f64>,
    pub c_max: Option<f64>,
    pub d_min: Option<f64>,
    pub d_max: Option<f64>,
}

fn in_range(value: Option<f64>, min: Option<f64>, max: Option<f64>) -> bool {
    if min.is_none() && max.is_none() {
        return true;
    }
    match value {
        Some(v) => min.is_none_or(|m| v >= m) && max.is_none_or(|m| v <= m),
        None => false,
    }
}

impl ResultFilter {
    pub fn matches(&self, r: &ResultRecord) -> bool {
        self.dataset.as_ref().is_none_or(|d| *d == r.dataset)
            && self.model.as_ref().is_none_or(|m| *m == r.model)
            && self.label.is_none_or(|l| l == r.label)
            && self.prediction.is_none_or(|p| Some(p) == r.prediction)
            && self.correct.is_none_or(|c| Some(c) == r.correct())
            && in_range(r.c_score, self.c_min, self.c_max)
            && in_range(r.d_orig, self.d_min, self.d_max)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SortKey {
    Distance,
    CScore,
    #[default]
    PairId,
}

impl FromStr for SortKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "distance" | "d_orig" => Ok(SortKey::Distance),
            "c" | "c_score" => Ok(SortKey::CScore),
            "pair_id" => Ok(SortKey::PairId),
            other => Err(format!("unknown sort key {other:?}, expected distance|c_score|pair_id")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SortOrder {
    #[default]
    Asc,
    Desc,
}

impl FromStr for SortOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "asc" => Ok(SortOrder::Asc),
            "desc" => Ok(SortOrder::Desc),
            other => Err(format!("unknown sort order {other:?}, expected asc|desc")),
        }
    }
}

/// Missing values sort last in either order.
fn cmp_optional(a: Option<f64>, b: Option<f64>, order: SortOrder) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => match order {
            SortOrder::Asc => x.total_cmp(&y),
            SortOrder::Desc => y.total_cmp(&x),
        },
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

/// Total order over records: the sort key, then `(dataset, model, pair_id)`
/// so that pages never overlap.
pub fn compare(a: &ResultRecord, b: &ResultRecord, key: SortKey, order: SortOrder) -> Ordering {
    let identity = |r: &ResultRecord| (r.dataset.clone(), r.model.clone(), r.pair_id.clone());
    let primary = match key {
        SortKey::Distance => cmp_optional(a.d_orig, b.d_orig, order),
        SortKey::CScore => cmp_optional(a.c_score, b.c_score, order),
        SortKey::PairId => Ordering::Equal,
    };
    let tie = match (key, order) {
        (SortKey::PairId, SortOrder::Desc) => identity(b).cmp(&identity(a)),
        _ => identity(a).cmp(&identity(b)),
    };
    primary.then(tie)
}

/// 1-based page request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Page {
    pub page: usize,
    pub per_page: usize,
}

impl Default for Page {
    fn default() -> Self {
        Self {
            page: 1,
            per_page: DEFAULT_PER_PAGE,
        }
    }
}

impl Page {
    pub fn new(page: usize, per_page: usize) -> Result<Self, StoreError> {
        if page == 0 {
            return Err(StoreError::InvalidArgument("page starts at 1".into()));
        }
        if per_page == 0 || per_page > MAX_PER_PAGE {
            return Err(StoreError::InvalidArgument(format!(
                "per_page must be in [1, {MAX_PER_PAGE}]"
            )));
        }
        Ok(Self { page, per_page })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultPage {
    pub items: Vec<ResultRecord>,
    pub total: usize,
    pub page: usize,
    pub per_page: usize,
}

/// A results store rooted at a directory. All reads go to disk, so a reader
/// always sees the latest atomically replaced index.
#[derive(Clone, Debug)]
pub struct ResultsStore {
    root: PathBuf,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>, StoreError> {
    let mut names = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(names),
        Err(e) => return Err(io_err(dir)(e)),
    };
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_type().map_err(io_err(dir))?.is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                if is_safe_name(name) {
                    names.push(name.to_owned());
                }
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Reads a JSON-lines file; a missing file reads as empty.
pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.to_owned(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

impl ResultsStore {
    /// Opens an existing store directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let meta = fs::metadata(&root).map_err(io_err(&root))?;
        if !meta.is_dir() {
            return Err(StoreError::InvalidArgument(format!("{} is not a directory", root.display())));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model_dir(&self, dataset: &str, model: &str) -> PathBuf {
        self.root.join(dataset).join(model)
    }

    pub fn index_path(&self, dataset: &str, model: &str) -> PathBuf {
        self.model_dir(dataset, model).join(INDEX_FILE)
    }

    /// Datasets with at least one model index.
    pub fn datasets(&self) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        for dataset in sorted_subdirs(&self.root)? {
            if !self.models_of(&dataset)?.is_empty() {
                out.push(dataset);
            }
        }
        Ok(out)
    }

    fn models_of(&self, dataset: &str) -> Result<Vec<String>, StoreError> {
        Ok(sorted_subdirs(&self.root.join(dataset))?
            .into_iter()
            .filter(|m| self.index_path(dataset, m).is_file())
            .collect())
    }

    /// Model names, optionally restricted to one dataset; sorted and unique.
    pub fn models(&self, dataset: Option<&str>) -> Result<Vec<String>, StoreError> {
        let datasets = match dataset {
            Some(d) => vec![d.to_owned()],
            None => self.datasets()?,
        };
        let mut out = Vec::new();
        for d in datasets {
            out.extend(self.models_of(&d)?);
        }
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// All records of one `(dataset, model)` index, in index order.
    pub fn load_index(&self, dataset: &str, model: &str) -> Result<Vec<ResultRecord>, StoreError> {
        if !is_safe_name(dataset) || !is_safe_name(model) {
            return Err(StoreError::InvalidArgument(format!("invalid dataset/model {dataset:?}/{model:?}")));
        }
        let path = self.index_path(dataset, model);
        if !path.is_file() {
            return Err(StoreError::NotFound(format!("store {dataset}/{model}")));
        }
        read_jsonl(&path)
    }

    fn records_for(&self, dataset: Option<&str>, model: Option<&str>) -> Result<Vec<ResultRecord>, StoreError> {
        let datasets = match dataset {
            Some(d) => vec![d.to_owned()],
            None => self.datasets()?,
        };
        let mut out = Vec::new();
        for d in &datasets {
            if !is_safe_name(d) {
                return Err(StoreError::InvalidArgument(format!("invalid dataset {d:?}")));
            }
            let models = match model {
                Some(m) => vec![m.to_owned()],
                None => self.models_of(d)?,
            };
            for m in &models {
                if !is_safe_name(m) {
                    return Err(StoreError::InvalidArgument(format!("invalid model {m:?}")));
                }
                if self.index_path(d, m).is_file() {
                    out.extend(read_jsonl::<ResultRecord>(&self.index_path(d, m))?);
                }
            }
        }
        Ok(out)
    }

    /// `(dataset, model)` stores that contain `pair_id`, sorted.
    pub fn locate(&self, pair_id: &str, dataset: Option<&str>, model: Option<&str>) -> Result<Vec<(String, String)>, StoreError> {
        let mut out: Vec<(String, String)> = self
            .records_for(dataset, model)?
            .into_iter()
            .filter(|r| r.pair_id == pair_id)
            .map(|r| (r.dataset, r.model))
            .collect();
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// Looks a pair up by id. Without dataset/model the id must be unique
    /// across the store.
    pub fn read_result(&self, pair_id: &str, dataset: Option<&str>, model: Option<&str>) -> Result<ResultRecord, StoreError> {
        let mut hits: Vec<ResultRecord> = self
            .records_for(dataset, model)?
            .into_iter()
            .filter(|r| r.pair_id == pair_id)
            .collect();
        match hits.len() {
            0 => Err(StoreError::NotFound(format!("pair {pair_id:?}"))),
            1 => Ok(hits.remove(0)),
            _ => Err(StoreError::Ambiguous {
                pair_id: pair_id.to_owned(),
                candidates: hits
                    .iter()
                    .map(|r| format!("{}/{}", r.dataset, r.model))
                    .collect::<Vec<_>>()
                    .join(", "),
            }),
        }
    }

    /// Filters, sorts with a total order, then slices one page.
    pub fn list_results(
        &self,
        filter: &ResultFilter,
        key: SortKey,
        order: SortOrder,
        page: Page,
    ) -> Result<ResultPage, StoreError> {
        let mut hits: Vec<ResultRecord> = self
            .records_for(filter.dataset.as_deref(), filter.model.as_deref())?
            .into_iter()
            .filter(|r| filter.matches(r))
            .collect();
        hits.sort_by(|a, b| compare(a, b, key, order));
        let total = hits.len();
        let start = (page.page - 1).saturating_mul(page.per_page).min(total);
        let end = start.saturating_add(page.per_page).min(total);
        Ok(ResultPage {
            items: hits.drain(start..end).collect(),
            total,
            page: page.page,
            per_page: page.per_page,
        })
    }

    pub fn artifact_path(&self, record: &ResultRecord, artifact: &Artifact) -> PathBuf {
        self.model_dir(&record.dataset, &record.model).join(&artifact.path)
    }

    fn decisions_path(&self, dataset: &str) -> Result<PathBuf, StoreError> {
        if !is_safe_name(dataset) {
            return Err(StoreError::InvalidArgument(format!("invalid dataset {dataset:?}")));
        }
        Ok(self.root.join(dataset).join(DECISIONS_FILE))
    }

    /// Appends one decision as a single write to the dataset's log. Callers
    /// serialize appends; existing lines are never rewritten.
    pub fn append_decision(&self, decision: &DecisionRecord) -> Result<(), StoreError> {
        let path = self.decisions_path(&decision.dataset)?;
        let mut line = serde_json::to_string(decision).map_err(|e| StoreError::InvalidArgument(e.to_string()))?;
        line.push('\n');
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))
    }

    /// Decisions for a pair, oldest first.
    pub fn decisions(&self, dataset: &str, pair_id: &str) -> Result<Vec<DecisionRecord>, StoreError> {
        let path = self.decisions_path(dataset)?;
        Ok(read_jsonl::<DecisionRecord>(&path)?
            .into_iter()
            .filter(|d| d.pair_id == pair_id)
            .collect())
    }
}
