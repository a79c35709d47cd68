use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use axum::extract::multipart::Multipart;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use xverify_core::confidence::Label;
use xverify_core::embedding::EmbeddingError;
use xverify_core::imaging::colormap_diverging;
use xverify_core::{explain_pair_methods, Image, MethodKind, PairExplainContext, PatchSpec, SweepParams};
use xverify_store::store::{DEFAULT_PER_PAGE, MAX_PER_PAGE};
use xverify_store::{
    timestamp_now, Artifact, ArtifactKind, DecisionRecord, Page, PairLabel, PairStatus, ResultFilter, ResultRecord,
    ResultsStore, SortKey, SortOrder, StoreError, Verdict,
};

use crate::error::{ApiError, ApiResult};
use crate::jobs::{JobFailure, JobStatus};
use crate::AppState;

type AppStateRef = State<Arc<AppState>>;

const UPLOAD_LIMIT: usize = 16 * 1024 * 1024;
const MAX_OPERATOR_LEN: usize = 128;
const MAX_NOTE_LEN: usize = 4096;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/datasets", get(datasets))
        .route("/api/models", get(models))
        .route("/api/pairs", get(list_pairs))
        .route("/api/pairs/{id}", get(pair_detail))
        .route("/api/pairs/{id}/artifact", get(pair_artifact))
        .route("/api/pairs/{id}/decision", post(post_decision))
        .route("/api/pairs/{id}/decisions", get(list_decisions))
        .route("/api/explain", post(explain))
        .route("/api/jobs/{id}", get(job))
        .route("/api/jobs/{id}/artifact", get(job_artifact))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method not allowed")
        })
        .layer(DefaultBodyLimit::max(UPLOAD_LIMIT))
        .with_state(state)
}

/// Runs blocking store access off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

/// Query parameters with unknown keys rejected. Empty values read as absent.
struct Params(HashMap<String, String>);

impl Params {
    fn new(query: Result<Query<HashMap<String, String>>, QueryRejection>, allowed: &[&str]) -> ApiResult<Self> {
        let Query(map) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
        if let Some(key) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(ApiError::bad_request(format!(
                "unknown query parameter {key:?}; expected one of {}",
                allowed.join(", ")
            )));
        }
        Ok(Self(map))
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|s| s.trim()).filter(|s| !s.is_empty())
    }

    fn parse<T: FromStr>(&self, key: &str) -> ApiResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| ApiError::bad_request(format!("{key}={v:?}: {e}"))))
            .transpose()
    }

    fn number(&self, key: &str) -> ApiResult<Option<f64>> {
        match self.parse::<f64>(key)? {
            Some(v) if !v.is_finite() => Err(ApiError::bad_request(format!("{key} must be finite"))),
            v => Ok(v),
        }
    }
}

fn parse_label(s: &str) -> Result<Label, String> {
    match s {
        "genuine" => Ok(Label::Genuine),
        "imposter" => Ok(Label::Imposter),
        other => Err(format!("expected genuine|imposter, got {other:?}")),
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(format!("expected true|false, got {other:?}")),
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn datasets(State(state): AppStateRef) -> ApiResult<Json<serde_json::Value>> {
    let store = state.store.clone();
    let names = blocking(move || Ok(store.datasets()?)).await?;
    Ok(Json(json!({ "datasets": names })))
}

async fn models(
    State(state): AppStateRef,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let params = Params::new(query, &["dataset"])?;
    let dataset = params.get("dataset").map(str::to_owned);
    let store = state.store.clone();
    let names = blocking(move || Ok(store.models(dataset.as_deref())?)).await?;
    Ok(Json(json!({ "models": names })))
}

fn pair_url(r: &ResultRecord) -> String {
    format!("/api/pairs/{}?dataset={}&model={}", r.pair_id, r.dataset, r.model)
}

fn artifact_url(r: &ResultRecord, a: &Artifact) -> String {
    let mut url = format!(
        "/api/pairs/{}/artifact?dataset={}&model={}&kind={}&which={}",
        r.pair_id, r.dataset, r.model, a.kind, a.which
    );
    if let Some(m) = a.method {
        url.push_str(&format!("&method={m}"));
    }
    url
}

#[derive(Serialize)]
struct PairSummary {
    pair_id: String,
    dataset: String,
    model: String,
    label: PairLabel,
    fold: u8,
    status: PairStatus,
    error: Option<String>,
    d_orig: Option<f64>,
    prediction: Option<Label>,
    threshold: Option<f64>,
    c_score: Option<f64>,
    correct: Option<bool>,
    methods: Vec<MethodKind>,
    created_at: String,
    url: String,
}

impl From<ResultRecord> for PairSummary {
    fn from(r: ResultRecord) -> Self {
        Self {
            correct: r.correct(),
            url: pair_url(&r),
            pair_id: r.pair_id,
            dataset: r.dataset,
            model: r.model,
            label: r.label,
            fold: r.fold,
            status: r.status,
            error: r.error,
            d_orig: r.d_orig,
            prediction: r.prediction,
            threshold: r.threshold,
            c_score: r.c_score,
            methods: r.methods,
            created_at: r.created_at,
        }
    }
}

#[derive(Serialize)]
struct PairsResponse {
    items: Vec<PairSummary>,
    total: usize,
    page: usize,
    per_page: usize,
}

const LIST_KEYS: &[&str] = &[
    "dataset", "model", "label", "prediction", "correct", "c_min", "c_max", "d_min", "d_max", "sort", "order", "page",
    "per_page",
];

async fn list_pairs(
    State(state): AppStateRef,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Json<PairsResponse>> {
    let p = Params::new(query, LIST_KEYS)?;
    let filter = ResultFilter {
        dataset: p.get("dataset").map(str::to_owned),
        model: p.get("model").map(str::to_owned),
        label: p.parse::<PairLabel>("label")?,
        prediction: p
            .get("prediction")
            .map(|v| parse_label(v).map_err(|e| ApiError::bad_request(format!("prediction: {e}"))))
            .transpose()?,
        correct: p
            .get("correct")
            .map(|v| parse_bool(v).map_err(|e| ApiError::bad_request(format!("correct: {e}"))))
            .transpose()?,
        c_min: p.number("c_min")?,
        c_max: p.number("c_max")?,
        d_min: p.number("d_min")?,
        d_max: p.number("d_max")?,
    };
    let key = p.parse::<SortKey>("sort")?.unwrap_or_default();
    let order = p.parse::<SortOrder>("order")?.unwrap_or_default();
    let page = p.parse::<usize>("page")?.unwrap_or(1);
    let per_page = p.parse::<usize>("per_page")?.unwrap_or(DEFAULT_PER_PAGE);
    let page = Page::new(page, per_page)
        .map_err(|_| ApiError::bad_request(format!("page must be ≥ 1 and per_page in [1, {MAX_PER_PAGE}]")))?;
    let store = state.store.clone();
    let result = blocking(move || Ok(store.list_results(&filter, key, order, page)?)).await?;
    Ok(Json(PairsResponse {
        items: result.items.into_iter().map(PairSummary::from).collect(),
        total: result.total,
        page: result.page,
        per_page: result.per_page,
    }))
}

#[derive(Serialize)]
struct ArtifactLink {
    kind: ArtifactKind,
    which: u8,
    method: Option<MethodKind>,
    url: String,
}

#[derive(Serialize)]
struct PairDetail {
    #[serde(flatten)]
    record: ResultRecord,
    correct: Option<bool>,
    artifact_urls: Vec<ArtifactLink>,
    decisions_url: String,
}

async fn find_record(state: &AppState, id: String, params: &Params) -> ApiResult<ResultRecord> {
    let dataset = params.get("dataset").map(str::to_owned);
    let model = params.get("model").map(str::to_owned);
    let store = state.store.clone();
    blocking(move || Ok(store.read_result(&id, dataset.as_deref(), model.as_deref())?)).await
}

async fn pair_detail(
    State(state): AppStateRef,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Json<PairDetail>> {
    let params = Params::new(query, &["dataset", "model"])?;
    let record = find_record(&state, id, &params).await?;
    let artifact_urls = record
        .artifacts
        .iter()
        .map(|a| ArtifactLink {
            kind: a.kind,
            which: a.which,
            method: a.method,
            url: artifact_url(&record, a),
        })
        .collect();
    Ok(Json(PairDetail {
        correct: record.correct(),
        decisions_url: format!("/api/pairs/{}/decisions?dataset={}", record.pair_id, record.dataset),
        artifact_urls,
        record,
    }))
}

/// Validated `kind`, `which` and `method` of an artifact request.
fn artifact_selector(params: &Params) -> ApiResult<(ArtifactKind, u8, Option<MethodKind>)> {
    let kind = params
        .parse::<ArtifactKind>("kind")?
        .ok_or_else(|| ApiError::bad_request("kind is required (xmap|smap|source)"))?;
    let which = match params.get("which") {
        Some("1") => 1,
        Some("2") => 2,
        _ => return Err(ApiError::bad_request("which must be 1 or 2")),
    };
    let method = params.parse::<MethodKind>("method")?;
    match (kind, method) {
        (ArtifactKind::Source, _) => Ok((kind, which, None)),
        (_, None) => Err(ApiError::bad_request("method is required (I|II|III) for xmap and smap")),
        (_, m) => Ok((kind, which, m)),
    }
}

async fn png_response(path: std::path::PathBuf) -> ApiResult<Response> {
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ApiError::not_found("artifact file is missing")),
        Err(e) => Err(ApiError::internal(format!("reading artifact: {e}"))),
    }
}

async fn pair_artifact(
    State(state): AppStateRef,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Response> {
    let params = Params::new(query, &["dataset", "model", "kind", "which", "method"])?;
    let (kind, which, method) = artifact_selector(&params)?;
    let record = find_record(&state, id, &params).await?;
    let artifact = record.artifact(kind, which, method).ok_or_else(|| {
        ApiError::not_found(format!(
            "pair {:?} has no {kind} artifact for image {which}{}",
            record.pair_id,
            method.map(|m| format!(", method {m}")).unwrap_or_default()
        ))
    })?;
    png_response(state.store.artifact_path(&record, artifact)).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionRequest {
    verdict: Verdict,
    operator: String,
    #[serde(default)]
    note: String,
    #[serde(default)]
    dataset: Option<String>,
}

/// The dataset holding `id`, for the decision log.
fn locate_dataset(store: &ResultsStore, id: &str, dataset: Option<&str>) -> Result<Option<String>, StoreError> {
    let mut datasets: Vec<String> = store.locate(id, dataset, None)?.into_iter().map(|(d, _)| d).collect();
    datasets.dedup();
    match datasets.len() {
        0 => Ok(None),
        1 => Ok(datasets.pop()),
        _ => Err(StoreError::Ambiguous {
            pair_id: id.to_owned(),
            candidates: datasets.join(", "),
        }),
    }
}

async fn post_decision(
    State(state): AppStateRef,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<DecisionRecord>)> {
    let params = Params::new(query, &["dataset"])?;
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let operator = req.operator.trim().to_owned();
    if operator.is_empty() || operator.chars().count() > MAX_OPERATOR_LEN {
        return Err(ApiError::bad_request(format!("operator must be 1-{MAX_OPERATOR_LEN} characters")));
    }
    if req.note.chars().count() > MAX_NOTE_LEN {
        return Err(ApiError::bad_request(format!("note exceeds {MAX_NOTE_LEN} characters")));
    }
    let dataset = req.dataset.or_else(|| params.get("dataset").map(str::to_owned));
    let store = state.store.clone();
    let pair_id = id.clone();
    let dataset = blocking(move || Ok(locate_dataset(&store, &pair_id, dataset.as_deref())?))
        .await?
        .ok_or_else(|| ApiError::conflict(format!("cannot record a decision for unknown pair {id:?}")))?;
    let record = DecisionRecord {
        pair_id: id,
        dataset,
        operator,
        verdict: req.verdict,
        note: req.note,
        created_at: timestamp_now(),
    };
    let _guard = state.decisions.lock().await;
    let store = state.store.clone();
    let written = record.clone();
    blocking(move || Ok(store.append_decision(&written)?)).await?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn list_decisions(
    State(state): AppStateRef,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let params = Params::new(query, &["dataset"])?;
    let dataset = params.get("dataset").map(str::to_owned);
    let store = state.store.clone();
    let items = blocking(move || {
        let dataset = locate_dataset(&store, &id, dataset.as_deref())?
            .ok_or_else(|| ApiError::not_found(format!("pair {id:?}")))?;
        Ok(store.decisions(&dataset, &id)?)
    })
    .await?;
    Ok(Json(json!({ "total": items.len(), "items": items })))
}

struct ExplainRequest {
    images: [Image; 2],
    methods: Vec<MethodKind>,
    specs: Vec<PatchSpec>,
    fold: Option<usize>,
}

/// Splits `method`/`methods`/`fold` off the parameter document; the rest
/// must be a [`SweepParams`].
fn parse_params(text: &str) -> ApiResult<(Vec<MethodKind>, Vec<PatchSpec>, Option<usize>)> {
    let bad = |m: String| ApiError::bad_request(format!("params: {m}"));
    let mut doc: serde_json::Map<String, serde_json::Value> = if text.trim().is_empty() {
        serde_json::Map::new()
    } else {
        serde_json::from_str(text).map_err(|e| bad(e.to_string()))?
    };
    let mut methods: Vec<MethodKind> = Vec::new();
    if let Some(m) = doc.remove("method") {
        methods.push(serde_json::from_value(m).map_err(|e| bad(format!("method: {e}")))?);
    }
    if let Some(ms) = doc.remove("methods") {
        let list: Vec<MethodKind> = serde_json::from_value(ms).map_err(|e| bad(format!("methods: {e}")))?;
        methods.extend(list);
    }
    if methods.is_empty() {
        methods.push(MethodKind::III);
    }
    methods.sort();
    methods.dedup();
    let fold = doc
        .remove("fold")
        .map(serde_json::from_value::<usize>)
        .transpose()
        .map_err(|e| bad(format!("fold: {e}")))?;
    let sweep: SweepParams =
        serde_json::from_value(serde_json::Value::Object(doc)).map_err(|e| bad(e.to_string()))?;
    let specs = sweep.to_specs().map_err(|e| bad(e.to_string()))?;
    Ok((methods, specs, fold))
}

async fn read_explain_form(mut form: Multipart) -> ApiResult<ExplainRequest> {
    let bad = |m: String| ApiError::bad_request(m);
    let (mut img1, mut img2, mut params) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(|e| bad(format!("multipart: {e}")))? {
        let name = field.name().unwrap_or_default().to_owned();
        let bytes = field.bytes().await.map_err(|e| bad(format!("multipart field {name}: {e}")))?;
        match name.as_str() {
            "image1" | "image2" => {
                let img = Image::from_png_bytes(&bytes).map_err(|e| bad(format!("{name}: {e}")))?;
                if name == "image1" {
                    img1 = Some(img);
                } else {
                    img2 = Some(img);
                }
            }
            "params" => {
                params = Some(String::from_utf8(bytes.to_vec()).map_err(|_| bad("params must be UTF-8 JSON".into()))?)
            }
            other => return Err(bad(format!("unexpected field {other:?}; expected image1, image2, params"))),
        }
    }
    let (methods, specs, fold) = parse_params(params.as_deref().unwrap_or(""))?;
    Ok(ExplainRequest {
        images: [
            img1.ok_or_else(|| bad("missing image1".into()))?,
            img2.ok_or_else(|| bad("missing image2".into()))?,
        ],
        methods,
        specs,
        fold,
    })
}

fn job_artifact_url(job_id: &str, kind: ArtifactKind, which: u8, method: Option<MethodKind>) -> String {
    let mut url = format!("/api/jobs/{job_id}/artifact?kind={kind}&which={which}");
    if let Some(m) = method {
        url.push_str(&format!("&method={m}"));
    }
    url
}

fn run_explain(
    state: &AppState,
    job_id: &str,
    req: ExplainRequest,
    dir: &Path,
) -> Result<serde_json::Value, JobFailure> {
    let backend = state.backend.clone().ok_or_else(|| JobFailure {
        status: StatusCode::SERVICE_UNAVAILABLE,
        message: "no embedding backend configured".into(),
    })?;
    let fail = |e: xverify_core::xmap::XMapError| {
        let backend_fault = e
            .embedding_error()
            .is_some_and(|e| !matches!(e.root(), EmbeddingError::DegenerateImage));
        JobFailure {
            status: if backend_fault { StatusCode::BAD_GATEWAY } else { StatusCode::BAD_REQUEST },
            message: e.to_string(),
        }
    };
    let io = |e: String| JobFailure {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e,
    };
    let [img1, img2] = req.images;
    let ctx = PairExplainContext::new(img1, img2, backend.as_ref(), req.specs.clone()).map_err(fail)?;
    let results = explain_pair_methods(&ctx, &req.methods).map_err(fail)?;

    let mut artifacts = Vec::new();
    let mut save = |img: &Image, kind: ArtifactKind, which: u8, method: Option<MethodKind>| {
        img.save_png(dir.join(Artifact::file_name(kind, which, method)))
            .map_err(|e| io(e.to_string()))?;
        artifacts.push(json!({
            "kind": kind,
            "which": which,
            "method": method,
            "url": job_artifact_url(job_id, kind, which, method),
        }));
        Ok::<_, JobFailure>(())
    };
    save(&ctx.img1, ArtifactKind::Source, 1, None)?;
    save(&ctx.img2, ArtifactKind::Source, 2, None)?;
    for r in &results {
        for (side, which) in [(0, 1u8), (1, 2)] {
            save(&r.blended[side], ArtifactKind::Xmap, which, Some(r.method))?;
            save(&colormap_diverging(&r.maps[side]), ArtifactKind::Smap, which, Some(r.method))?;
        }
    }
    let score = match &state.confidence {
        Some(model) => Some(
            *model
                .fold(req.fold)
                .map_err(|e| JobFailure {
                    status: StatusCode::BAD_REQUEST,
                    message: e.to_string(),
                })?,
        ),
        None => None,
    };
    let c = score.map(|m| (m.threshold, m.score(ctx.d_orig)));
    Ok(json!({
        "d_orig": ctx.d_orig,
        "threshold": c.map(|(t, _)| t),
        "prediction": c.map(|(_, s)| s.prediction),
        "c_score": c.map(|(_, s)| s.value),
        "methods": req.methods,
        "parameters": req.specs,
        "artifacts": artifacts,
    }))
}

async fn explain(State(state): AppStateRef, form: Result<Multipart, axum::extract::multipart::MultipartRejection>) -> ApiResult<Response> {
    if state.backend.is_none() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "live recompute requested but no embedding backend is configured",
        ));
    }
    let form = form.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let req = read_explain_form(form).await?;
    let worker_state = Arc::clone(&state);
    let (job_id, done) = state
        .jobs
        .submit(Box::new(move |id: &str, dir: &Path| run_explain(&worker_state, id, req, dir)))?;

    let finished = tokio::time::timeout(state.sync_wait, done).await.is_ok();
    let view = state
        .jobs
        .view(&job_id)
        .ok_or_else(|| ApiError::internal("job vanished"))?;
    match (finished, view.status) {
        (true, JobStatus::Failed) => {
            let failure = state
                .jobs
                .failure(&job_id)
                .ok_or_else(|| ApiError::internal("job failed without a reason"))?;
            Err(ApiError::new(failure.status, failure.message))
        }
        (true, _) => Ok((StatusCode::OK, Json(view)).into_response()),
        (false, _) => Ok((
            StatusCode::ACCEPTED,
            [(header::LOCATION, view.url.clone())],
            Json(view),
        )
            .into_response()),
    }
}

async fn job(State(state): AppStateRef, UrlPath(id): UrlPath<String>) -> ApiResult<Json<crate::JobView>> {
    state
        .jobs
        .view(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("job {id:?}")))
}

async fn job_artifact(
    State(state): AppStateRef,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult<Response> {
    let params = Params::new(query, &["kind", "which", "method"])?;
    let (kind, which, method) = artifact_selector(&params)?;
    let view = state
        .jobs
        .view(&id)
        .ok_or_else(|| ApiError::not_found(format!("job {id:?}")))?;
    if view.status != JobStatus::Done {
        return Err(ApiError::not_found(format!("job {id:?} has no artifacts (status {:?})", view.status)));
    }
    png_response(state.jobs.scratch_dir(&id).join(Artifact::file_name(kind, which, method))).await
}
