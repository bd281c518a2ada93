//! JSON-over-HTTP service for the layout editor.
//!
//! Weights are shared read-only. Each session holds the last generation
//! behind its own lock, and the session table is an LRU capped at
//! [`SESSION_CAP`].

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use lru::LruCache;
use partlayout::dataset::{PartSchema, SchemaSet};
use partlayout::pipeline::{add_part, edit_and_regenerate, generate_layout, EditCommand, Generation, GenerationRequest, LayoutModel};
use partlayout::BBox;
use serde::{Deserialize, Serialize};

pub const SESSION_CAP: usize = 1024;

type Session = Arc<tokio::sync::Mutex<Generation>>;

pub struct AppState {
    pub model: LayoutModel,
    sessions: Mutex<LruCache<String, Session>>,
}

impl AppState {
    pub fn new(model: LayoutModel) -> Arc<Self> {
        Arc::new(AppState {
            model,
            sessions: Mutex::new(LruCache::new(NonZeroUsize::new(SESSION_CAP).unwrap())),
        })
    }

    fn session(&self, id: &str) -> Option<Session> {
        self.sessions.lock().unwrap().get(id).cloned()
    }

    fn insert(&self, generation: Generation) -> String {
        let id = uuid::Uuid::new_v4().to_string();
        self.sessions
            .lock()
            .unwrap()
            .put(id.clone(), Arc::new(tokio::sync::Mutex::new(generation)));
        id
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }
}

/// A category or part given by name or by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Key {
    Index(usize),
    Name(String),
}

impl Key {
    fn category<'s>(&self, schemas: &'s SchemaSet) -> Result<&'s PartSchema, ApiError> {
        match self {
            Key::Index(i) => schemas.by_id(*i),
            Key::Name(n) => schemas.by_name(n),
        }
        .ok_or_else(|| ApiError::invalid(format!("unknown category {self:?}")))
    }

    fn part(&self, schema: &PartSchema) -> Result<usize, ApiError> {
        match self {
            Key::Index(i) if *i < schema.num_parts() => Some(*i),
            Key::Name(n) => schema.part_index(n),
            _ => None,
        }
        .ok_or_else(|| ApiError::invalid(format!("category {} has no part {self:?}", schema.category_name)))
    }
}

#[derive(Debug, Deserialize)]
pub struct GenerateBody {
    pub category: Key,
    #[serde(default)]
    pub parts: Vec<Key>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
pub struct EditBody {
    pub session_id: String,
    #[serde(default)]
    pub edits: Vec<EditCommand>,
}

#[derive(Debug, Deserialize)]
pub struct AddPartBody {
    pub session_id: String,
    pub part: Key,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayoutView {
    pub width: usize,
    pub height: usize,
    pub hash: String,
    pub png_base64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub category: usize,
    pub seed: u64,
    pub boxes: BTreeMap<usize, BBox>,
    pub part_names: BTreeMap<usize, String>,
    pub layout: LayoutView,
    pub forced: Vec<usize>,
    pub notices: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn invalid(message: String) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message,
        }
    }

    fn not_found(id: &str) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: format!("unknown session {id}"),
        }
    }
}

impl From<partlayout::Error> for ApiError {
    fn from(e: partlayout::Error) -> Self {
        use partlayout::Error::*;
        let status = match e {
            InvalidEdit(_) | Config(_) | Shape(_) | Degenerate(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn view(state: &AppState, id: String, g: &Generation) -> Result<SessionResponse, ApiError> {
    let schema = state.model.schemas.get(g.category_id)?;
    Ok(SessionResponse {
        session_id: id,
        category: g.category_id,
        seed: g.seed,
        boxes: g.boxes.clone(),
        part_names: g.boxes.keys().map(|&k| (k, schema.part_names[k].clone())).collect(),
        layout: LayoutView {
            width: g.layout.width,
            height: g.layout.height,
            hash: g.layout.hash(),
            png_base64: base64::engine::general_purpose::STANDARD.encode(g.layout.png_bytes()?),
        },
        forced: g.forced.clone(),
        notices: g.notices.clone(),
    })
}

/// Runs model work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
    })?
}

async fn health() -> &'static str {
    "ok"
}

async fn schema(State(state): State<Arc<AppState>>) -> Json<SchemaSet> {
    Json(state.model.schemas.clone())
}

async fn generate(
    State(state): State<Arc<AppState>>,
    Json(body): Json<GenerateBody>,
) -> Result<Json<SessionResponse>, ApiError> {
    blocking(move || {
        let schema = body.category.category(&state.model.schemas)?;
        let parts = body.parts.iter().map(|p| p.part(schema)).collect::<Result<_, _>>()?;
        let req = GenerationRequest::new(schema.category_id, parts, body.seed);
        let g = generate_layout(&state.model, &req)?;
        let id = state.insert(g.clone());
        Ok(Json(view(&state, id, &g)?))
    })
    .await
}

async fn edit(State(state): State<Arc<AppState>>, Json(body): Json<EditBody>) -> Result<Json<SessionResponse>, ApiError> {
    let session = state.session(&body.session_id).ok_or_else(|| ApiError::not_found(&body.session_id))?;
    let mut guard = session.lock_owned().await;
    blocking(move || {
        let next = edit_and_regenerate(&state.model, &guard, &body.edits)?;
        *guard = next;
        Ok(Json(view(&state, body.session_id, &guard)?))
    })
    .await
}

async fn addpart(
    State(state): State<Arc<AppState>>,
    Json(body): Json<AddPartBody>,
) -> Result<Json<SessionResponse>, ApiError> {
    let session = state.session(&body.session_id).ok_or_else(|| ApiError::not_found(&body.session_id))?;
    let mut guard = session.lock_owned().await;
    blocking(move || {
        let schema = state.model.schemas.get(guard.category_id)?;
        let part = body.part.part(schema)?;
        let inst = guard.instance(state.model.schemas.p_max);
        let mut next = add_part(&state.model, &inst, part, body.seed.unwrap_or(guard.seed))?;
        next.seed = guard.seed;
        *guard = next;
        Ok(Json(view(&state, body.session_id, &guard)?))
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/schema", get(schema))
        .route("/generate", post(generate))
        .route("/edit", post(edit))
        .route("/addpart", post(addpart))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
