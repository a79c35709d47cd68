//! The batch pipeline: explain every pair, score it, and write artifacts and
//! the index of one `(dataset, model)` store.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;
use xverify_core::confidence::{ConfidenceModel, DistanceSample};
use xverify_core::embedding::{Concurrency, EmbeddingError};
use xverify_core::imaging::colormap_diverging;
use xverify_core::xmap::XMapError;
use xverify_core::{explain_pair_methods, EmbeddingBackend, Image, MethodKind, PairExplainContext, PatchSpec};

use crate::pairs::PairRecord;
use crate::record::{Artifact, ArtifactKind, PairStatus, ResultRecord};
use crate::store::{read_jsonl, INDEX_FILE};
use crate::{is_safe_name, timestamp_now};

pub const LOCK_FILE: &str = ".lock";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("another batch holds {0}; remove it if no batch is running")]
    Locked(PathBuf),
    #[error("invalid batch configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BatchError + '_ {
    move |source| BatchError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Clone, Debug)]
pub struct BatchConfig {
    pub dataset: String,
    pub methods: Vec<MethodKind>,
    pub specs: Vec<PatchSpec>,
    /// Model used for scoring. When `None` and the pairs are labelled, a
    /// fold-wise model is fitted on the batch's distances.
    pub confidence: Option<ConfidenceModel>,
}

impl BatchConfig {
    pub fn new(dataset: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            methods: MethodKind::ALL.to_vec(),
            specs: PatchSpec::default_sweep(),
            confidence: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchSummary {
    pub dataset: String,
    pub model: String,
    pub index_path: PathBuf,
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
    /// Failures caused by the backend rather than the input data.
    pub backend_failures: usize,
    pub confidence: Option<ConfidenceModel>,
    /// Why records carry no scores, when they don't.
    pub confidence_note: Option<String>,
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(path: PathBuf) -> Result<Self, BatchError> {
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(BatchError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Failure {
    message: String,
    backend: bool,
}

impl Failure {
    fn data(message: String) -> Self {
        Self { message, backend: false }
    }
}

fn classify(err: XMapError) -> Failure {
    let backend = err
        .embedding_error()
        .is_some_and(|e| !matches!(e.root(), EmbeddingError::DegenerateImage));
    Failure {
        message: err.to_string(),
        backend,
    }
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn base_record(pair: &PairRecord, model: &str, config: &BatchConfig) -> ResultRecord {
    ResultRecord {
        pair_id: pair.pair_id.clone(),
        dataset: config.dataset.clone(),
        model: model.to_owned(),
        label: pair.label,
        fold: pair.fold,
        path1: path_string(&pair.path1),
        path2: path_string(&pair.path2),
        status: PairStatus::Ok,
        error: None,
        d_orig: None,
        prediction: None,
        threshold: None,
        c_score: None,
        methods: config.methods.clone(),
        artifacts: Vec::new(),
        created_at: String::new(),
        parameters: config.specs.clone(),
        quality_score: None,
    }
}

fn write_png(img: &Image, path: &Path) -> Result<(), Failure> {
    img.save_png(path)
        .map_err(|e| Failure::data(format!("writing {}: {e}", path.display())))
}

fn explain_and_write(
    pair: &PairRecord,
    backend: &dyn EmbeddingBackend,
    config: &BatchConfig,
    model_dir: &Path,
    record: &mut ResultRecord,
) -> Result<(), Failure> {
    let load = |no: u8, path: &Path| {
        Image::load_png(path).map_err(|e| Failure::data(format!("image {no} ({}): {e}", path.display())))
    };
    let img1 = load(1, &pair.path1)?;
    let img2 = load(2, &pair.path2)?;
    let ctx = PairExplainContext::new(img1, img2, backend, config.specs.clone()).map_err(classify)?;
    let results = explain_pair_methods(&ctx, &config.methods).map_err(classify)?;

    let pair_dir = model_dir.join(&pair.pair_id);
    fs::create_dir_all(&pair_dir).map_err(|e| Failure::data(format!("{}: {e}", pair_dir.display())))?;
    let mut artifacts = Vec::new();
    for (which, img) in [(1u8, &ctx.img1), (2, &ctx.img2)] {
        let a = Artifact::new(&pair.pair_id, ArtifactKind::Source, which, None);
        write_png(img, &model_dir.join(&a.path))?;
        artifacts.push(a);
    }
    for result in &results {
        for which in [1u8, 2] {
            let side = usize::from(which - 1);
            let xmap = Artifact::new(&pair.pair_id, ArtifactKind::Xmap, which, Some(result.method));
            write_png(&result.blended[side], &model_dir.join(&xmap.path))?;
            let smap = Artifact::new(&pair.pair_id, ArtifactKind::Smap, which, Some(result.method));
            write_png(&colormap_diverging(&result.maps[side]), &model_dir.join(&smap.path))?;
            artifacts.push(xmap);
            artifacts.push(smap);
        }
    }
    record.d_orig = Some(ctx.d_orig);
    record.artifacts = artifacts;
    Ok(())
}

fn process_pair(
    pair: &PairRecord,
    backend: &dyn EmbeddingBackend,
    config: &BatchConfig,
    model_dir: &Path,
) -> (ResultRecord, Option<bool>) {
    let mut record = base_record(pair, backend.name(), config);
    let outcome = explain_and_write(pair, backend, config, model_dir, &mut record);
    record.created_at = timestamp_now();
    match outcome {
        Ok(()) => (record, None),
        Err(f) => {
            record.status = PairStatus::Failed;
            record.error = Some(f.message);
            record.d_orig = None;
            record.artifacts.clear();
            (record, Some(f.backend))
        }
    }
}

/// A stored record can be reused when it succeeded with the same inputs and
/// parameters and its artifacts are still on disk.
fn reusable(existing: &ResultRecord, fresh: &ResultRecord, model_dir: &Path) -> bool {
    existing.status == PairStatus::Ok
        && existing.d_orig.is_some()
        && existing.model == fresh.model
        && existing.path1 == fresh.path1
        && existing.path2 == fresh.path2
        && existing.label == fresh.label
        && existing.fold == fresh.fold
        && existing.methods == fresh.methods
        && existing.parameters == fresh.parameters
        && existing.artifacts.iter().all(|a| model_dir.join(&a.path).is_file())
}

fn render_index(records: &[ResultRecord]) -> Result<Vec<u8>, BatchError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Replaces `path` with `bytes` via a temporary file and rename, skipping the
/// write when the content is unchanged.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BatchError> {
    if fs::read(path).ok().as_deref() == Some(bytes) {
        return Ok(());
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

/// Current records in pairs order, followed by records of pairs that are no
/// longer in the pairs file.
fn assemble(
    pairs: &[PairRecord],
    current: &HashMap<String, ResultRecord>,
    previous: &[ResultRecord],
) -> Vec<ResultRecord> {
    let ids: HashSet<&str> = pairs.iter().map(|p| p.pair_id.as_str()).collect();
    let mut out: Vec<ResultRecord> = pairs.iter().filter_map(|p| current.get(&p.pair_id).cloned()).collect();
    out.extend(previous.iter().filter(|r| !ids.contains(r.pair_id.as_str())).cloned());
    out
}

fn score(records: &mut HashMap<String, ResultRecord>, pairs: &[PairRecord], config: &BatchConfig) -> (Option<ConfidenceModel>, Option<String>) {
    let ok: Vec<&ResultRecord> = pairs
        .iter()
        .filter_map(|p| records.get(&p.pair_id))
        .filter(|r| r.status == PairStatus::Ok)
        .collect();
    let (model, note) = match &config.confidence {
        Some(m) => (Some(m.clone()), None),
        None => {
            let samples: Vec<DistanceSample> = ok
                .iter()
                .filter_map(|r| {
                    Some(DistanceSample::new(r.d_orig?, r.label.known()?, usize::from(r.fold), r.pair_id.clone()))
                })
                .collect();
            if samples.is_empty() {
                (None, Some("no labelled pairs and no confidence model supplied".to_owned()))
            } else {
                match ConfidenceModel::fit_folds(&samples) {
                    Ok(m) => (Some(m), None),
                    Err(e) => (None, Some(format!("confidence fit failed: {e}"))),
                }
            }
        }
    };
    for r in records.values_mut() {
        let scored = match (&model, r.status, r.d_orig) {
            (Some(m), PairStatus::Ok, Some(d)) => m.fold(Some(usize::from(r.fold))).ok().map(|f| (f.threshold, f.score(d))),
            _ => None,
        };
        r.threshold = scored.map(|(t, _)| t);
        r.prediction = scored.map(|(_, c)| c.prediction);
        r.c_score = scored.map(|(_, c)| c.value);
    }
    (model, note)
}

fn validate(pairs: &[PairRecord], backend: &dyn EmbeddingBackend, config: &mut BatchConfig) -> Result<(), BatchError> {
    let bad = |m: String| Err(BatchError::InvalidConfig(m));
    if !is_safe_name(&config.dataset) {
        return bad(format!("dataset name {:?} is not a valid directory name", config.dataset));
    }
    if !is_safe_name(backend.name()) {
        return bad(format!("backend name {:?} is not a valid directory name", backend.name()));
    }
    if config.methods.is_empty() {
        return bad("at least one method is required".into());
    }
    config.methods.sort();
    config.methods.dedup();
    if config.specs.is_empty() {
        return bad("at least one patch spec is required".into());
    }
    for spec in &config.specs {
        spec.validate().map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
    }
    let mut seen = HashSet::new();
    for p in pairs {
        if p.dataset != config.dataset {
            return bad(format!("pair {:?} belongs to dataset {:?}, not {:?}", p.pair_id, p.dataset, config.dataset));
        }
        if !seen.insert(p.pair_id.as_str()) {
            return bad(format!("duplicate pair_id {:?}", p.pair_id));
        }
    }
    Ok(())
}

/// Runs the pipeline for `pairs` into `out_root/<dataset>/<backend name>/`.
///
/// Pairs whose stored record matches the current inputs are skipped and keep
/// their timestamps. Unreadable images and backend errors become failed
/// records. The index is checkpointed after every chunk of pairs, so an
/// interrupted batch resumes where it stopped.
pub fn run_batch(
    pairs: &[PairRecord],
    backend: &dyn EmbeddingBackend,
    config: &BatchConfig,
    out_root: impl AsRef<Path>,
) -> Result<BatchSummary, BatchError> {
    let mut config = config.clone();
    validate(pairs, backend, &mut config)?;
    let out_root = out_root.as_ref();
    let model = backend.name().to_owned();
    let model_dir = out_root.join(&config.dataset).join(&model);
    fs::create_dir_all(&model_dir).map_err(io_err(&model_dir))?;
    let _lock = Lock::acquire(model_dir.join(LOCK_FILE))?;
    let index_path = model_dir.join(INDEX_FILE);

    let previous: Vec<ResultRecord> = read_jsonl(&index_path)?;
    let previous_by_id: HashMap<&str, &ResultRecord> = previous.iter().map(|r| (r.pair_id.as_str(), r)).collect();

    let mut records: HashMap<String, ResultRecord> = HashMap::new();
    let mut todo = Vec::new();
    for pair in pairs {
        let fresh = base_record(pair, &model, &config);
        match previous_by_id.get(pair.pair_id.as_str()) {
            Some(existing) if reusable(existing, &fresh, &model_dir) => {
                records.insert(pair.pair_id.clone(), (*existing).clone());
            }
            _ => todo.push(pair),
        }
    }
    let skipped = records.len();

    let chunk = match backend.concurrency() {
        Concurrency::Parallel => rayon::current_num_threads().max(1) * 2,
        Concurrency::Serial => 4,
    };
    let (mut failed, mut backend_failures) = (0, 0);
    for batch in todo.chunks(chunk) {
        let done: Vec<(ResultRecord, Option<bool>)> = match backend.concurrency() {
            Concurrency::Parallel => batch
                .par_iter()
                .map(|p| process_pair(p, backend, &config, &model_dir))
                .collect(),
            Concurrency::Serial => batch
                .iter()
                .map(|p| process_pair(p, backend, &config, &model_dir))
                .collect(),
        };
        for (record, failure) in done {
            if let Some(is_backend) = failure {
                failed += 1;
                backend_failures += usize::from(is_backend);
            }
            records.insert(record.pair_id.clone(), record);
        }
        write_atomic(&index_path, &render_index(&assemble(pairs, &records, &previous))?)?;
    }

    let (confidence, confidence_note) = score(&mut records, pairs, &config);
    let ordered = assemble(pairs, &records, &previous);
    for r in ordered.iter().take(pairs.len()) {
        if r.status == PairStatus::Ok {
            let meta = serde_json::to_vec_pretty(r).map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
            write_atomic(&model_dir.join(&r.pair_id).join(META_FILE), &meta)?;
        }
    }
    write_atomic(&index_path, &render_index(&ordered)?)?;

    Ok(BatchSummary {
        dataset: config.dataset,
        model,
        index_path,
        computed: todo.len(),
        skipped,
        failed,
        backend_failures,
        confidence,
        confidence_note,
    })
}
