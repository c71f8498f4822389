//! JSON HTTP API over the engine.
//!
//! Every error body has the shape `{"error":{"code":"UPPER_SNAKE","message":"..."}}`.
//! Engine calls block (remote backends use a blocking client), so handlers
//! run them on the blocking pool, with at most `server.parallelism` in flight.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use corpusqa::config::AppConfig;
use corpusqa::embed::EmbedError;
use corpusqa::engine::{AnswerResult, ChatTurn, EngineError, QueryDefaults};
use corpusqa::index::{IndexError, RetrievalHit};
use corpusqa::ingest::{load_document, DocFormat, IngestError};
use corpusqa::llm::{GenerationError, GenerationParams};
use corpusqa::{Engine, RetrievalParams, SystemPromptPreset};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    config: Arc<AppConfig>,
    defaults: Arc<QueryDefaults>,
    /// Where to persist the index after each ingest; `None` keeps it in memory.
    index_path: Option<PathBuf>,
    permits: Arc<Semaphore>,
    save_lock: Arc<Mutex<()>>,
}

impl AppState {
    pub fn new(engine: Engine, config: AppConfig, index_path: Option<PathBuf>) -> anyhow::Result<Self> {
        let defaults = config.query_defaults()?;
        Ok(AppState {
            engine: Arc::new(engine),
            permits: Arc::new(Semaphore::new(config.server.parallelism.max(1))),
            config: Arc::new(config),
            defaults: Arc::new(defaults),
            index_path,
            save_lock: Arc::new(Mutex::new(())),
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    async fn blocking<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        F: FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
        T: Send + 'static,
    {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|_| ApiError::internal("server is shutting down"))?;
        let engine = Arc::clone(&self.engine);
        tokio::task::spawn_blocking(move || f(&engine))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        use StatusCode as S;
        let message = e.to_string();
        let (status, code) = match &e {
            EngineError::EmptyQuery => (S::BAD_REQUEST, "EMPTY_TEXT"),
            EngineError::UnknownPreset(_) => (S::BAD_REQUEST, "BAD_PRESET"),
            EngineError::InvalidParams(_) | EngineError::Generation(GenerationError::InvalidParams(_)) => {
                (S::BAD_REQUEST, "BAD_PARAMS")
            }
            EngineError::BudgetTooSmall { .. } => (S::BAD_REQUEST, "BUDGET_TOO_SMALL"),
            EngineError::SessionNotFound(_) => (S::NOT_FOUND, "SESSION_NOT_FOUND"),
            EngineError::Ingest(IngestError::EmptyDocument { .. }) => (S::BAD_REQUEST, "EMPTY_DOCUMENT"),
            EngineError::Ingest(_) => (S::BAD_REQUEST, "BAD_DOCUMENT"),
            EngineError::Embedding(EmbedError::EmptyText { .. }) => (S::BAD_REQUEST, "EMPTY_TEXT"),
            EngineError::Embedding(EmbedError::BackendUnavailable(_))
            | EngineError::Generation(GenerationError::BackendUnavailable(_)) => {
                (S::BAD_GATEWAY, "BACKEND_UNAVAILABLE")
            }
            EngineError::Embedding(EmbedError::MalformedResponse(_) | EmbedError::DimensionMismatch { .. })
            | EngineError::Generation(GenerationError::MalformedResponse(_)) => {
                (S::BAD_GATEWAY, "BAD_BACKEND_RESPONSE")
            }
            EngineError::Embedding(EmbedError::ZeroVector) => (S::UNPROCESSABLE_ENTITY, "UNEMBEDDABLE_TEXT"),
            EngineError::Generation(GenerationError::ContextOverflow(_)) => {
                (S::UNPROCESSABLE_ENTITY, "CONTEXT_OVERFLOW")
            }
            EngineError::Index(IndexError::DimensionMismatch { .. } | IndexError::ModelMismatch { .. }) => {
                (S::CONFLICT, "INDEX_MISMATCH")
            }
            _ => (S::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        ApiError::new(status, code, message)
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Serialize)]
struct HitView<'a> {
    chunk_id: &'a str,
    doc_id: &'a str,
    score: f64,
}

fn hit_views(hits: &[RetrievalHit]) -> Vec<HitView<'_>> {
    hits.iter()
        .map(|h| HitView { chunk_id: &h.chunk_id, doc_id: &h.doc_id, score: round6(h.score) })
        .collect()
}

fn answer_json(result: &AnswerResult, debug: bool) -> serde_json::Map<String, Value> {
    let mut out = serde_json::Map::new();
    out.insert("answer".into(), json!(result.answer));
    out.insert("no_context".into(), json!(result.no_context));
    out.insert("hits".into(), json!(hit_views(&result.hits)));
    out.insert("finish_reason".into(), json!(result.finish_reason));
    if debug {
        out.insert("prompt".into(), json!(result.assembled.messages));
    }
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestRequest {
    doc_id: String,
    #[serde(default)]
    format: Option<DocFormat>,
    text: String,
    #[serde(default)]
    source_name: Option<String>,
}

/// Per-request overrides shared by `/api/query` and session messages.
#[derive(Deserialize)]
struct AskRequest {
    text: String,
    top_k: Option<usize>,
    temperature: Option<f64>,
    max_tokens: Option<usize>,
    seed: Option<u64>,
    system_prompt_id: Option<String>,
    system_prompt: Option<String>,
    #[serde(default)]
    debug: bool,
}

impl AskRequest {
    fn params(&self, defaults: &QueryDefaults) -> Result<(RetrievalParams, GenerationParams), ApiError> {
        let rp = RetrievalParams { top_k: self.top_k.unwrap_or(defaults.retrieval.top_k) };
        let gp = GenerationParams {
            temperature: self.temperature.unwrap_or(defaults.generation.temperature),
            max_tokens: self.max_tokens.unwrap_or(defaults.generation.max_tokens),
            seed: self.seed.or(defaults.generation.seed),
        };
        if rp.top_k == 0 {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "BAD_PARAMS", "top_k must be >= 1"));
        }
        gp.validate()
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BAD_PARAMS", e.to_string()))?;
        Ok((rp, gp))
    }

    fn preset(&self, defaults: &QueryDefaults) -> Result<SystemPromptPreset, ApiError> {
        match &self.system_prompt_id {
            None => Ok(defaults.preset.clone()),
            Some(id) => Ok(SystemPromptPreset::resolve(id, self.system_prompt.as_deref())?),
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SessionRequest {
    system_prompt_id: Option<String>,
    system_prompt: Option<String>,
    memory_window: Option<usize>,
}

#[derive(Serialize)]
struct TurnView<'a> {
    user_text: &'a str,
    answer_text: &'a str,
    hits: Vec<HitView<'a>>,
    params: &'a corpusqa::engine::TurnParams,
    created_at: &'a str,
}

impl<'a> From<&'a ChatTurn> for TurnView<'a> {
    fn from(t: &'a ChatTurn) -> Self {
        TurnView {
            user_text: &t.user_text,
            answer_text: &t.answer_text,
            hits: hit_views(&t.hits),
            params: &t.params,
            created_at: &t.created_at,
        }
    }
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok", "version": VERSION}))
}

async fn get_config(State(state): State<AppState>) -> Json<Value> {
    Json(json!(state.config.effective()))
}

async fn ingest(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: IngestRequest = parse_body(&body)?;
    let policy = state.config.chunking;
    let save_to = state.index_path.clone();
    let save_lock = Arc::clone(&state.save_lock);
    let added = state
        .blocking(move |engine| {
            let source = req.source_name.unwrap_or_else(|| req.doc_id.clone());
            let raw = load_document(&source, req.text.as_bytes(), Some(req.format.unwrap_or(DocFormat::Plain)), &req.doc_id)
                .map_err(EngineError::from)?;
            let added = engine.ingest(&raw, policy)?;
            if let Some(path) = save_to {
                let _guard = save_lock.lock().unwrap_or_else(|p| p.into_inner());
                engine.index().save(&path).map_err(EngineError::from)?;
            }
            Ok(added)
        })
        .await?;
    Ok(Json(json!({"chunks_added": added})))
}

async fn query(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: AskRequest = parse_body(&body)?;
    let (rp, gp) = req.params(&state.defaults)?;
    let preset = req.preset(&state.defaults)?;
    let budget = state.defaults.budget_tokens;
    let debug = req.debug;
    let result = state
        .blocking(move |engine| Ok(engine.answer_query(&req.text, &rp, &gp, &preset, budget)?))
        .await?;
    Ok(Json(Value::Object(answer_json(&result, debug))))
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: SessionRequest = if body.is_empty() { SessionRequest::default() } else { parse_body(&body)? };
    let preset = match &req.system_prompt_id {
        None => state.defaults.preset.clone(),
        Some(id) => SystemPromptPreset::resolve(id, req.system_prompt.as_deref())?,
    };
    let window = req.memory_window.unwrap_or(state.defaults.memory_window);
    let session_id = state.engine.create_session(preset, window)?;
    Ok((StatusCode::CREATED, Json(json!({"session_id": session_id}))).into_response())
}

async fn post_message(
    State(state): State<AppState>,
    Path(session_id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    state.engine.session(&session_id)?;
    let req: AskRequest = parse_body(&body)?;
    if req.system_prompt_id.is_some() {
        return Err(ApiError::bad_request("the system prompt is fixed when the session is created"));
    }
    let (rp, gp) = req.params(&state.defaults)?;
    let budget = state.defaults.budget_tokens;
    let debug = req.debug;
    let (result, turn_index) = state
        .blocking(move |engine| Ok(engine.chat_turn(&session_id, &req.text, &rp, &gp, budget)?))
        .await?;
    let mut out = answer_json(&result, debug);
    out.insert("turn_index".into(), json!(turn_index));
    Ok(Json(Value::Object(out)))
}

async fn get_session(State(state): State<AppState>, Path(session_id): Path<String>) -> Result<Json<Value>, ApiError> {
    let session = state.engine.session(&session_id)?;
    let turns: Vec<TurnView<'_>> = session.turns.iter().map(TurnView::from).collect();
    Ok(Json(json!({"session_id": session.session_id, "turns": turns})))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "METHOD_NOT_ALLOWED", "method not allowed")
}

async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let started = Instant::now();
    let response = next.run(req).await;
    tracing::info!(
        method = %method,
        path = %path,
        status = response.status().as_u16(),
        duration_ms = started.elapsed().as_millis() as u64,
        "request"
    );
    response
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/api/config", get(get_config))
        .route("/api/ingest", post(ingest))
        .route("/api/query", post(query))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/messages", post(post_message))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

/// Binds and serves until Ctrl-C.
pub async fn serve(state: AppState, bind_address: &str, port: u16) -> anyhow::Result<()> {
    let addr = format!("{bind_address}:{port}");
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {addr}: {e}"))?;
    tracing::info!(address = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
