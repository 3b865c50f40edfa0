//! HTTP session service: upload an image, add or undo clicks one at a time,
//! and get back the probability map, mask and best caption after each step.
//!
//! | method | path | body | result |
//! |---|---|---|---|
//! | POST | `/api/sessions` | `{image: base64 PNG, proposals?: [...]}` | `{id}` |
//! | POST | `/api/sessions/{id}/seeds` | `{x, y, polarity}` | interaction response |
//! | POST | `/api/sessions/{id}/undo` | | interaction response |
//! | GET | `/api/sessions/{id}/result` | | interaction response |
//! | DELETE | `/api/sessions/{id}` | | 204 |
//!
//! Interaction responses carry `width`, `height`, `seeds`, `probability`
//! (base64 grayscale PNG, `round(255 p)`; raw little-endian `f32` with
//! `?format=f32`), `mask` (base64 PNG), `mask_box`, and `caption`/`iou` when
//! proposals were attached and the mask is non-empty. Errors are
//! `{"error": "..."}` with 400 (bad input), 404 (unknown session),
//! 409 (undo with no clicks) or 422 (click outside the image).

mod error;
mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use indexmap::IndexMap;
use lyncean::fusion::{MatchCriterion, RegionProposal, DEFAULT_TOP_K};
use lyncean::imagecore::decode_image;
use lyncean::interaction::{Polarity, Seed};
use lyncean::Network32;
use serde::Deserialize;
use tower_http::services::ServeDir;

pub use error::ApiError;
use session::{infer, Session};
pub use session::{InferenceSettings, ProbFormat};

pub const DEFAULT_PORT: u16 = 8737;
pub const DEFAULT_SESSION_CAP: usize = 64;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Sessions kept in memory; the least recently used one is dropped beyond this.
    pub session_cap: usize,
    pub threshold: f64,
    pub top_k: usize,
    pub criterion: MatchCriterion,
    /// Directory served at `/` (the browser client bundle).
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_cap: DEFAULT_SESSION_CAP,
            threshold: 0.5,
            top_k: DEFAULT_TOP_K,
            criterion: MatchCriterion::default(),
            static_dir: None,
        }
    }
}

type SessionRef = Arc<tokio::sync::Mutex<Session>>;

struct AppState {
    net: Arc<Network32>,
    settings: InferenceSettings,
    cap: usize,
    // Insertion order doubles as recency order: touched sessions move to the back.
    sessions: Mutex<IndexMap<String, SessionRef>>,
}

impl AppState {
    fn lookup(&self, id: &str) -> Result<SessionRef, ApiError> {
        let mut map = self.sessions.lock().expect("session table poisoned");
        let idx = map
            .get_index_of(id)
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))?;
        let last = map.len() - 1;
        map.move_index(idx, last);
        Ok(map[last].clone())
    }

    fn insert(&self, id: String, session: Session) {
        let mut map = self.sessions.lock().expect("session table poisoned");
        while map.len() >= self.cap {
            map.shift_remove_index(0);
        }
        map.insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    }

    fn remove(&self, id: &str) -> bool {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .shift_remove(id)
            .is_some()
    }
}

type Shared = Arc<AppState>;

/// Builds the application. `session_cap` below 1 is treated as 1.
pub fn router(net: Network32, config: ServiceConfig) -> Router {
    let state = Arc::new(AppState {
        net: Arc::new(net),
        settings: InferenceSettings {
            threshold: config.threshold,
            top_k: config.top_k,
            criterion: config.criterion,
        },
        cap: config.session_cap.max(1),
        sessions: Mutex::new(IndexMap::new()),
    });
    let api = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", delete(delete_session))
        .route("/api/sessions/{id}/seeds", post(add_seed))
        .route("/api/sessions/{id}/undo", post(undo_seed))
        .route("/api/sessions/{id}/result", get(get_result))
        .with_state(state);
    match config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(net: Network32, config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(net, config)).await
}

#[derive(Deserialize)]
struct CreateBody {
    image: String,
    #[serde(default)]
    proposals: Option<Vec<RegionProposal>>,
}

#[derive(Deserialize)]
struct SeedBody {
    x: i64,
    y: i64,
    polarity: Polarity,
}

#[derive(Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

fn parse_format(q: &FormatQuery) -> Result<ProbFormat, ApiError> {
    match q.format.as_deref() {
        None | Some("png") => Ok(ProbFormat::Png),
        Some("f32") => Ok(ProbFormat::F32),
        Some(other) => Err(ApiError::BadRequest(format!(
            "unknown format {other:?}; use png or f32"
        ))),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

fn json_bytes(body: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn run_inference(
    state: &Shared,
    image: Arc<lyncean::imagecore::ImageRgb>,
    seeds: Vec<Seed>,
    proposals: Option<Arc<[RegionProposal]>>,
) -> Result<session::Outcome, ApiError> {
    let net = state.net.clone();
    let settings = state.settings;
    tokio::task::spawn_blocking(move || infer(&net, settings, &image, &seeds, proposals.as_deref()))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::from)
}

async fn create_session(State(state): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateBody = parse_json(&body)?;
    let png = B64
        .decode(req.image.trim())
        .map_err(|e| ApiError::BadRequest(format!("image is not valid base64: {e}")))?;
    let image = Arc::new(decode_image(&png).map_err(|e| ApiError::BadRequest(e.to_string()))?);
    let proposals: Option<Arc<[RegionProposal]>> = match req.proposals {
        Some(p) if p.is_empty() => return Err(ApiError::BadRequest("proposals list is empty".into())),
        Some(p) => Some(p.into()),
        None => None,
    };
    let outcome = run_inference(&state, image.clone(), Vec::new(), proposals.clone()).await?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    state.insert(
        id.clone(),
        Session {
            image,
            proposals,
            seeds: Vec::new(),
            outcome,
        },
    );
    Ok(Json(serde_json::json!({ "id": id })).into_response())
}

async fn add_seed(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let format = parse_format(&q)?;
    let req: SeedBody = parse_json(&body)?;
    let handle = state.lookup(&id)?;
    let mut session = handle.lock_owned().await;
    let (w, h) = session.image.dims();
    let seed = match (usize::try_from(req.x), usize::try_from(req.y)) {
        (Ok(x), Ok(y)) if x < w && y < h => Seed {
            x,
            y,
            polarity: req.polarity,
        },
        _ => {
            return Err(ApiError::OutOfBounds(format!(
                "click ({}, {}) lies outside the {w}x{h} image",
                req.x, req.y
            )))
        }
    };
    let mut seeds = session.seeds.clone();
    seeds.push(seed);
    let outcome = run_inference(&state, session.image.clone(), seeds.clone(), session.proposals.clone()).await?;
    session.seeds = seeds;
    session.outcome = outcome;
    Ok(json_bytes(session.render(format)))
}

async fn undo_seed(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> Result<Response, ApiError> {
    let format = parse_format(&q)?;
    let handle = state.lookup(&id)?;
    let mut session = handle.lock_owned().await;
    if session.seeds.is_empty() {
        return Err(ApiError::NothingToUndo);
    }
    let mut seeds = session.seeds.clone();
    seeds.pop();
    let outcome = run_inference(&state, session.image.clone(), seeds.clone(), session.proposals.clone()).await?;
    session.seeds = seeds;
    session.outcome = outcome;
    Ok(json_bytes(session.render(format)))
}

async fn get_result(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> Result<Response, ApiError> {
    let format = parse_format(&q)?;
    let handle = state.lookup(&id)?;
    let session = handle.lock().await;
    Ok(json_bytes(session.render(format)))
}

async fn delete_session(State(state): State<Shared>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    if state.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::UnknownSession(id))
    }
}
