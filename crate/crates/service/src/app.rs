//! HTTP gateway.

// Handlers return ready-made error responses; boxing them buys nothing here.
#![allow(clippy::result_large_err)]

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use homegate_core::backend::{Backend, ChatCompletionsBackend, MockBackend};
use homegate_core::kb::{HashedNgramEmbedder, KbStats};
use homegate_core::pipeline::{DecisionRecord, PipelineError};
use homegate_core::{DialogueTurn, KnowledgeBase, Label, MemoryStore, Pipeline, PromptMode, Timestamp};

use crate::config::{BackendSpec, ServiceConfig};

pub const REQUEST_ID_HEADER: &str = "x-request-id";
pub const DECISION_LOG: &str = "decisions.jsonl";

pub struct AppState {
    pipeline: Pipeline,
    log: parking_lot::Mutex<File>,
    next_id: AtomicU64,
    strict_households: bool,
    auth_token: Option<String>,
}

impl AppState {
    /// Opens stores under the data directory and builds the pipeline.
    /// The config is assumed validated.
    pub fn open(cfg: &ServiceConfig) -> anyhow::Result<Arc<Self>> {
        let backend: Arc<dyn Backend> = match &cfg.backend {
            BackendSpec::Mock(rules) => Arc::new(MockBackend::new(rules.clone())),
            BackendSpec::Http(c) => Arc::new(ChatCompletionsBackend::new(c.clone())?),
        };
        Self::with_backend(cfg, backend)
    }

    pub fn with_backend(cfg: &ServiceConfig, backend: Arc<dyn Backend>) -> anyhow::Result<Arc<Self>> {
        let memory = MemoryStore::open(cfg.data_dir.join("memory"), cfg.history_capacity).context("memory store")?;
        let kb = KnowledgeBase::open(
            cfg.data_dir.join("kb"),
            Arc::new(HashedNgramEmbedder::default()),
            cfg.kb_capacity,
        )
        .context("knowledge base")?;
        let memory = Arc::new(memory);
        let kb = Arc::new(kb);
        let pipeline = match cfg.template()? {
            Some(t) => Pipeline::with_template(cfg.pipeline.clone(), t, memory, kb, backend)?,
            None => Pipeline::new(cfg.pipeline.clone(), memory, kb, backend)?,
        };
        let log_path = cfg.data_dir.join(DECISION_LOG);
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?;
        Ok(Arc::new(Self {
            pipeline,
            log: parking_lot::Mutex::new(log),
            next_id: AtomicU64::new(1),
            strict_households: cfg.strict_households,
            auth_token: cfg.auth_token(),
        }))
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    fn append_log(&self, record: &DecisionRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_string(record).expect("decision record serializes");
        line.push('\n');
        let mut f = self.log.lock();
        f.write_all(line.as_bytes())?;
        f.flush()
    }
}

#[derive(Debug, Clone)]
pub struct RequestId(pub String);

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/v1/decide", post(decide))
        .route("/v1/feedback", post(feedback))
        .route("/v1/households/{id}/history", get(history))
        .route("/v1/households/{id}/kb", get(kb))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_auth));
    Router::new()
        .route("/healthz", get(health))
        .merge(api)
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(state.clone(), request_id))
        .with_state(state)
}

async fn request_id(State(state): State<Arc<AppState>>, mut req: Request, next: Next) -> Response {
    let id = req
        .headers()
        .get(REQUEST_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty() && v.len() <= 128)
        .map(str::to_string)
        .unwrap_or_else(|| format!("req-{:08}", state.next_id.fetch_add(1, Ordering::SeqCst)));
    req.extensions_mut().insert(RequestId(id.clone()));
    let mut resp = next.run(req).await;
    if let Ok(v) = HeaderValue::from_str(&id) {
        resp.headers_mut().insert(HeaderName::from_static(REQUEST_ID_HEADER), v);
    }
    resp
}

async fn require_auth(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.auth_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            let id = req.extensions().get::<RequestId>().cloned();
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").with_id(id);
        }
    }
    next.run(req).await
}

struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn with_id(self, id: Option<RequestId>) -> Response {
        let body = json!({
            "error": self.message,
            "request_id": id.map(|r| r.0),
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, Response>;

fn parse_body<T: DeserializeOwned>(body: &Bytes, id: &RequestId) -> ApiResult<T> {
    let bad = |message: String| ApiError::bad_request(format!("invalid body: {message}")).with_id(Some(id.clone()));
    let mut de = serde_json::Deserializer::from_slice(body);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            bad(e.inner().to_string())
        } else {
            bad(format!("{path}: {}", e.inner()))
        }
    })?;
    de.end().map_err(|e| bad(e.to_string()))?;
    Ok(value)
}

fn require_household(household_id: &str, id: &RequestId) -> ApiResult<()> {
    if household_id.trim().is_empty() {
        return Err(ApiError::bad_request("household_id: must be non-empty").with_id(Some(id.clone())));
    }
    Ok(())
}

fn server_now() -> Timestamp {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs() as Timestamp)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecideRequest {
    household_id: String,
    text: String,
    #[serde(default)]
    timestamp: Option<Timestamp>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecideResponse {
    pub request_id: String,
    pub household_id: String,
    pub verdict: Label,
    pub mode: PromptMode,
    pub degraded: bool,
    pub retrieved: Vec<String>,
    pub latency_ms: u64,
    pub timestamp: Timestamp,
}

async fn decide(State(state): State<Arc<AppState>>, Extension(id): Extension<RequestId>, body: Bytes) -> Response {
    match decide_inner(&state, &id, &body).await {
        Ok(r) => (StatusCode::OK, Json(r)).into_response(),
        Err(r) => r,
    }
}

async fn decide_inner(state: &AppState, id: &RequestId, body: &Bytes) -> ApiResult<DecideResponse> {
    let req: DecideRequest = parse_body(body, id)?;
    require_household(&req.household_id, id)?;
    let timestamp = req.timestamp.unwrap_or_else(server_now);
    let decision = match state.pipeline.decide(&req.household_id, &req.text, timestamp).await {
        Ok(d) => d,
        Err(PipelineError::BackendUnavailable(msg)) => {
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, msg).with_id(Some(id.clone())));
        }
        Err(e) => {
            tracing::error!(request_id = %id.0, error = %e, "decide failed");
            return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).with_id(Some(id.clone())));
        }
    };
    let record = DecisionRecord {
        request_id: id.0.clone(),
        household_id: req.household_id,
        text: req.text,
        timestamp,
        decision,
    };
    if let Err(e) = state.append_log(&record) {
        tracing::error!(request_id = %id.0, error = %e, "decision log write failed");
    }
    Ok(DecideResponse {
        request_id: record.request_id,
        household_id: record.household_id,
        verdict: record.decision.verdict,
        mode: record.decision.mode,
        degraded: record.decision.degraded,
        retrieved: record.decision.retrieved.into_iter().map(|c| c.case_id).collect(),
        latency_ms: record.decision.backend_latency_ms,
        timestamp,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackRequest {
    household_id: String,
    utterance: String,
    predicted: Label,
    corrected: Label,
    #[serde(default)]
    timestamp: Option<Timestamp>,
}

async fn feedback(State(state): State<Arc<AppState>>, Extension(id): Extension<RequestId>, body: Bytes) -> Response {
    let run = || -> ApiResult<Response> {
        let req: FeedbackRequest = parse_body(&body, &id)?;
        require_household(&req.household_id, &id)?;
        if req.utterance.trim().is_empty() {
            return Err(ApiError::bad_request("utterance: must be non-empty").with_id(Some(id.clone())));
        }
        let now = req.timestamp.unwrap_or_else(server_now);
        let stored = state
            .pipeline
            .record_feedback(&req.household_id, &req.utterance, req.predicted, req.corrected, now)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).with_id(Some(id.clone())))?;
        Ok(Json(json!({ "request_id": id.0, "stored": stored })).into_response())
    };
    run().unwrap_or_else(|r| r)
}

#[derive(Debug, Deserialize)]
struct HistoryQuery {
    limit: Option<usize>,
}

const DEFAULT_HISTORY_LIMIT: usize = 50;

fn known(state: &AppState, household: &str) -> bool {
    state.pipeline.memory().contains_household(household) || state.pipeline.kb().contains_household(household)
}

async fn history(
    State(state): State<Arc<AppState>>,
    Extension(id): Extension<RequestId>,
    Path(household): Path<String>,
    Query(q): Query<HistoryQuery>,
) -> Response {
    if state.strict_households && !known(&state, &household) {
        return ApiError::new(StatusCode::NOT_FOUND, format!("unknown household {household:?}")).with_id(Some(id));
    }
    let turns: Vec<DialogueTurn> = state
        .pipeline
        .memory()
        .last_turns(&household, q.limit.unwrap_or(DEFAULT_HISTORY_LIMIT));
    Json(json!({ "request_id": id.0, "household_id": household, "turns": turns })).into_response()
}

async fn kb(
    State(state): State<Arc<AppState>>,
    Extension(id): Extension<RequestId>,
    Path(household): Path<String>,
) -> Response {
    if state.strict_households && !known(&state, &household) {
        return ApiError::new(StatusCode::NOT_FOUND, format!("unknown household {household:?}")).with_id(Some(id));
    }
    let stats: KbStats = state.pipeline.kb().kb_stats(&household);
    Json(json!({ "request_id": id.0, "household_id": household, "stats": stats })).into_response()
}

async fn health(State(state): State<Arc<AppState>>, Extension(id): Extension<RequestId>) -> Response {
    let backend = state.pipeline.backend();
    let reachable = backend.probe().await;
    Json(json!({
        "request_id": id.0,
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "backend": backend.describe(),
        "reachable": reachable,
        "mode": state.pipeline.config().mode,
    }))
    .into_response()
}

async fn not_found(Extension(id): Extension<RequestId>) -> Response {
    ApiError::new(StatusCode::NOT_FOUND, "no such route").with_id(Some(id))
}

/// Serves until ctrl-c or SIGTERM, then drains in-flight requests.
pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let state = AppState::open(&cfg)?;
    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .with_context(|| format!("binding {}", cfg.listen))?;
    tracing::info!(addr = %listener.local_addr()?, data_dir = %cfg.data_dir.display(), "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    tracing::info!("shut down");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
