//! HTTP API over a results store: browsing, artifacts, operator decisions
//! and on-demand recomputation.

mod error;
mod jobs;
mod routes;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::http::{HeaderValue, Method};
use tower_http::cors::{AllowOrigin, CorsLayer};
use xverify_core::{ConfidenceModel, EmbeddingBackend};
use xverify_store::ResultsStore;

pub use error::{ApiError, ApiResult};
pub use jobs::{JobQueue, JobStatus, JobView};

pub const ADDR_ENV: &str = "XVERIFY_ADDR";
pub const STORE_ENV: &str = "XVERIFY_STORE";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

#[derive(Clone)]
pub struct ApiConfig {
    pub store_root: PathBuf,
    pub addr: SocketAddr,
    /// Scores recomputed pairs when present.
    pub confidence: Option<ConfidenceModel>,
    /// Enables `POST /api/explain`.
    pub backend: Option<Arc<dyn EmbeddingBackend>>,
    /// Allowed CORS origins. Empty allows any localhost origin.
    pub cors_origins: Vec<String>,
    /// Recompute scratch area; defaults to a directory under the system
    /// temp dir.
    pub scratch_dir: Option<PathBuf>,
    pub max_running_jobs: usize,
    pub max_queued_jobs: usize,
    /// How long `POST /api/explain` waits before answering 202 with a job id.
    pub sync_wait: Duration,
}

impl ApiConfig {
    pub fn new(store_root: impl Into<PathBuf>) -> Self {
        Self {
            store_root: store_root.into(),
            addr: DEFAULT_ADDR.parse().expect("valid default address"),
            confidence: None,
            backend: None,
            cors_origins: Vec::new(),
            scratch_dir: None,
            max_running_jobs: 4,
            max_queued_jobs: 64,
            sync_wait: Duration::from_secs(20),
        }
    }
}

pub struct AppState {
    pub store: ResultsStore,
    pub confidence: Option<ConfidenceModel>,
    pub backend: Option<Arc<dyn EmbeddingBackend>>,
    pub jobs: Arc<JobQueue>,
    pub sync_wait: Duration,
    /// Serializes appends to the decision logs.
    pub decisions: tokio::sync::Mutex<()>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("store: {0}")]
    Store(#[from] xverify_store::StoreError),
    #[error("invalid CORS origin {0:?}")]
    Cors(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

fn cors_layer(origins: &[String]) -> Result<CorsLayer, ServeError> {
    let allow = if origins.is_empty() {
        AllowOrigin::predicate(|origin: &HeaderValue, _| {
            let Ok(origin) = origin.to_str() else { return false };
            let host = origin
                .strip_prefix("http://")
                .or_else(|| origin.strip_prefix("https://"))
                .unwrap_or("");
            let host = host.rsplit_once(':').map_or(host, |(h, port)| {
                if port.chars().all(|c| c.is_ascii_digit()) {
                    h
                } else {
                    host
                }
            });
            matches!(host, "localhost" | "127.0.0.1" | "[::1]")
        })
    } else {
        let values = origins
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| ServeError::Cors(o.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        AllowOrigin::list(values)
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([axum::http::header::CONTENT_TYPE]))
}

/// Builds the application. Fails when the store root is not a readable
/// directory.
pub fn app(config: ApiConfig) -> Result<axum::Router, ServeError> {
    let store = ResultsStore::open(&config.store_root)?;
    let scratch = config
        .scratch_dir
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join(format!("xverify-scratch-{}", std::process::id())));
    let state = AppState {
        store,
        confidence: config.confidence.clone(),
        backend: config.backend.clone(),
        jobs: Arc::new(JobQueue::new(scratch, config.max_running_jobs, config.max_queued_jobs)),
        sync_wait: config.sync_wait,
        decisions: tokio::sync::Mutex::new(()),
    };
    Ok(routes::router(Arc::new(state)).layer(cors_layer(&config.cors_origins)?))
}

/// Serves until the process is stopped.
pub async fn serve(config: ApiConfig) -> Result<(), ServeError> {
    let addr = config.addr;
    let app = app(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app).await?;
    Ok(())
}
