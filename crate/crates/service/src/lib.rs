//! HTTP backend for pairwise annotation sessions.
//!
//! Each session is one (annotator, emotion) merge-sort run over the served
//! pool. Answers are appended to `session-{annotator}-{emotion}.jsonl` and
//! synced to disk before the response is sent, so a restarted server replays
//! the files in its data directory and resumes every session at its pending
//! query.

use std::collections::HashMap;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prefrank_core::dataset::{read_records, resolve_image, ItemId};
use prefrank_core::emotion::Emotion;
use prefrank_core::imageio::sha256_hex;
use prefrank_core::ranking::{
    append_durable, consistency_check, session_file_name, ComparisonAnswer, Next, SessionHeader, SortSession,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Core(#[from] prefrank_core::error::Error),
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// `pool.jsonl` or `subset.jsonl` listing the images to rank.
    pub pool: PathBuf,
    pub data_dir: PathBuf,
    /// Optional static UI bundle served under `/`.
    pub static_dir: Option<PathBuf>,
}

struct PoolImage {
    bytes: Vec<u8>,
    sha256: String,
}

struct AppState {
    pool_ref: String,
    pool_sha256: String,
    ids: Vec<ItemId>,
    images: HashMap<ItemId, PoolImage>,
    data_dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<SortSession>>>>,
}

pub fn session_id(annotator_id: &str, emotion: Emotion) -> String {
    format!("{annotator_id}-{emotion}")
}

fn valid_annotator(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Reads a session file, discarding a torn final line left by a crash
/// mid-append. Such a line was never acknowledged.
fn load_session_file(path: &FsPath) -> Result<SortSession, prefrank_core::error::Error> {
    let text = fs::read_to_string(path).map_err(|e| prefrank_core::error::Error::Io { path: path.into(), source: e })?;
    let clean = match text.rfind('\n') {
        Some(end) if end + 1 < text.len() => {
            tracing::warn!("{}: dropping incomplete trailing record", path.display());
            let kept = &text[..=end];
            fs::write(path, kept).map_err(|e| prefrank_core::error::Error::Io { path: path.into(), source: e })?;
            kept
        }
        _ => text.as_str(),
    };
    SortSession::from_jsonl(clean)
}

impl AppState {
    fn load(cfg: &ServiceConfig) -> Result<Self, prefrank_core::error::Error> {
        let records = read_records(&cfg.pool)?;
        let mut images = HashMap::with_capacity(records.len());
        let mut ids = Vec::with_capacity(records.len());
        for r in &records {
            let path = resolve_image(&cfg.pool, r);
            let bytes = fs::read(&path).map_err(|e| prefrank_core::error::Error::Io { path: path.clone(), source: e })?;
            let sha256 = sha256_hex(&bytes);
            if sha256 != r.sha256 {
                return Err(prefrank_core::error::Error::Format {
                    what: "pool image".into(),
                    detail: format!("{} does not match its manifest hash", path.display()),
                });
            }
            ids.push(r.id);
            images.insert(r.id, PoolImage { bytes, sha256 });
        }
        fs::create_dir_all(&cfg.data_dir)
            .map_err(|e| prefrank_core::error::Error::Io { path: cfg.data_dir.clone(), source: e })?;

        let mut sessions = HashMap::new();
        let entries = fs::read_dir(&cfg.data_dir)
            .map_err(|e| prefrank_core::error::Error::Io { path: cfg.data_dir.clone(), source: e })?;
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with("session-") && name.ends_with(".jsonl") {
                let s = load_session_file(&entry.path())?;
                let id = session_id(&s.header().annotator_id, s.emotion());
                tracing::info!("recovered session {id} at {} answers", s.log().len());
                sessions.insert(id, Arc::new(Mutex::new(s)));
            }
        }
        let pool_bytes = fs::read(&cfg.pool).map_err(|e| prefrank_core::error::Error::Io { path: cfg.pool.clone(), source: e })?;
        Ok(Self {
            pool_ref: cfg.pool.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            pool_sha256: sha256_hex(&pool_bytes),
            ids,
            images,
            data_dir: cfg.data_dir.clone(),
            sessions: RwLock::new(sessions),
        })
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<SortSession>>> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {id}")))
    }

    fn session_path(&self, header: &SessionHeader) -> PathBuf {
        self.data_dir.join(session_file_name(&header.annotator_id, header.emotion))
    }
}

#[derive(Debug, Deserialize)]
struct CreateRequest {
    annotator_id: String,
    emotion: String,
    #[serde(default)]
    pool_ref: Option<String>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SessionDescriptor {
    pub session_id: String,
    pub annotator_id: String,
    pub emotion: Emotion,
    pub total_items: usize,
    pub answered_count: usize,
    pub estimated_remaining: usize,
    pub worst_case: usize,
    pub completed: bool,
}

fn describe(s: &SortSession) -> SessionDescriptor {
    let p = s.progress();
    SessionDescriptor {
        session_id: session_id(&s.header().annotator_id, s.emotion()),
        annotator_id: s.header().annotator_id.clone(),
        emotion: s.emotion(),
        total_items: p.total_items,
        answered_count: p.answered,
        estimated_remaining: p.remaining_at_most,
        worst_case: p.worst_case,
        completed: p.completed,
    }
}

async fn create_session(State(app): State<Arc<AppState>>, Json(req): Json<CreateRequest>) -> ApiResult<Response> {
    if !valid_annotator(&req.annotator_id) {
        return Err(ServiceError::BadRequest("annotator_id must be 1-64 characters of [A-Za-z0-9_.]".into()));
    }
    let emotion: Emotion = req.emotion.parse().map_err(|e: prefrank_core::error::Error| ServiceError::BadRequest(e.to_string()))?;
    if let Some(r) = &req.pool_ref {
        if r != &app.pool_ref && r != &app.pool_sha256 {
            return Err(ServiceError::BadRequest(format!("this server hosts pool {}, not {r}", app.pool_ref)));
        }
    }
    let header = SessionHeader { items: app.ids.clone(), seed: req.seed, emotion, annotator_id: req.annotator_id };
    let id = session_id(&header.annotator_id, emotion);
    let mut sessions = app.sessions.write().expect("session map lock");
    if let Some(existing) = sessions.get(&id) {
        let s = existing.lock().expect("session lock");
        if s.header() != &header {
            return Err(ServiceError::Conflict(format!("session {id} exists with different settings")));
        }
        return Ok((StatusCode::OK, Json(json!({ "session_id": id, "resumed": true })) ).into_response());
    }
    let session = SortSession::from_header(header)?;
    let path = app.session_path(session.header());
    append_durable(&path, &[session.header_line()?])?;
    if let Some(r) = session.result() {
        append_durable(&path, &[SortSession::final_line(r)?])?;
    }
    sessions.insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id, "resumed": false }))).into_response())
}

fn image_url(id: ItemId) -> String {
    format!("/api/images/{id}.png")
}

fn next_payload(id: &str, s: &SortSession) -> serde_json::Value {
    match s.next_query() {
        Next::Query(q) => json!({
            "completed": false,
            "query_id": q.query_id,
            "emotion": q.emotion,
            "left": { "id": q.left_id, "url": image_url(q.left_id) },
            "right": { "id": q.right_id, "url": image_url(q.right_id) },
            "progress": describe(s),
        }),
        Next::Completed(_) => json!({
            "completed": true,
            "ranking_url": format!("/api/sessions/{id}/ranking"),
            "progress": describe(s),
        }),
    }
}

async fn next_query(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let slot = app.session(&id)?;
    let s = slot.lock().expect("session lock");
    Ok(Json(next_payload(&id, &s)))
}

#[derive(Debug, Deserialize)]
struct AnswerRequest {
    query_id: u64,
    winner: ItemId,
}

async fn answer(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<AnswerRequest>,
) -> ApiResult<Json<serde_json::Value>> {
    let slot = app.session(&id)?;
    let mut s = slot.lock().expect("session lock");
    let answered = s.log().len() as u64;
    if req.query_id < answered {
        // a retried POST whose first attempt was applied
        let prior = &s.log()[req.query_id as usize];
        if prior.winner == req.winner {
            return Ok(Json(json!({ "accepted": true, "duplicate": true, "next": next_payload(&id, &s) })));
        }
        return Err(ServiceError::Conflict(format!("query {} was already answered differently", req.query_id)));
    }
    let Some(pending) = s.pending() else {
        return Err(ServiceError::Conflict("session is already complete".into()));
    };
    if req.query_id != pending.query_id {
        return Err(ServiceError::Conflict(format!("query {} is not pending (expected {})", req.query_id, pending.query_id)));
    }
    if req.winner != pending.left_id && req.winner != pending.right_id {
        return Err(ServiceError::BadRequest(format!(
            "winner {} is neither {} nor {}",
            req.winner, pending.left_id, pending.right_id
        )));
    }
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).ok();
    let mut advanced = s.clone();
    advanced.submit_at(ComparisonAnswer { query_id: req.query_id, winner: req.winner }, now)?;
    let mut lines = vec![SortSession::entry_line(advanced.log().last().expect("just answered"))?];
    if let Some(r) = advanced.result() {
        lines.push(SortSession::final_line(r)?);
    }
    append_durable(&app.session_path(advanced.header()), &lines)?;
    *s = advanced;
    Ok(Json(json!({ "accepted": true, "duplicate": false, "next": next_payload(&id, &s) })))
}

async fn progress(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionDescriptor>> {
    let slot = app.session(&id)?;
    let s = slot.lock().expect("session lock");
    Ok(Json(describe(&s)))
}

async fn ranking(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let slot = app.session(&id)?;
    let s = slot.lock().expect("session lock");
    let r = s.result().ok_or_else(|| ServiceError::Conflict(format!("session {id} is not complete")))?;
    Ok(Json(json!({
        "session_id": id,
        "emotion": s.emotion(),
        "ranking": r.order,
        "consistency": consistency_check(r, s.log())?,
    })))
}

async fn image(State(app): State<Arc<AppState>>, Path(file): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    let stem = file.strip_suffix(".png").unwrap_or(&file);
    let img = stem
        .parse::<ItemId>()
        .ok()
        .and_then(|id| app.images.get(&id))
        .ok_or_else(|| ServiceError::NotFound(format!("no image {file}")))?;
    let etag = format!("\"{}\"", img.sha256);
    let cache = [
        (header::ETAG, etag.clone()),
        (header::CACHE_CONTROL, "public, max-age=31536000, immutable".to_string()),
    ];
    if headers.get(header::IF_NONE_MATCH).and_then(|v| v.to_str().ok()) == Some(etag.as_str()) {
        return Ok((StatusCode::NOT_MODIFIED, cache).into_response());
    }
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, "image/png".to_string())], cache, img.bytes.clone()).into_response())
}

async fn list_sessions(State(app): State<Arc<AppState>>) -> Json<Vec<SessionDescriptor>> {
    let sessions = app.sessions.read().expect("session map lock");
    let mut out: Vec<SessionDescriptor> = sessions.values().map(|s| describe(&s.lock().expect("session lock"))).collect();
    out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    Json(out)
}

/// Loads the pool, recovers sessions from `data_dir`, and builds the router.
pub fn router(cfg: &ServiceConfig) -> Result<Router, prefrank_core::error::Error> {
    let state = Arc::new(AppState::load(cfg)?);
    let api = Router::new()
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/{id}/next", get(next_query))
        .route("/api/sessions/{id}/answer", post(answer))
        .route("/api/sessions/{id}/progress", get(progress))
        .route("/api/sessions/{id}/ranking", get(ranking))
        .route("/api/images/{file}", get(image))
        .with_state(state);
    Ok(match &cfg.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    })
}

/// Serves until the listener fails or the task is dropped.
pub async fn serve(cfg: &ServiceConfig, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let app = router(cfg).map_err(std::io::Error::other)?;
    axum::serve(listener, app).await
}
