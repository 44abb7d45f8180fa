//! HTTP API.
//!
//! Clients open a session holding a window and a target span, then ask for
//! latents by opaque handle. Latent values never leave the server. Changing
//! the window or span of a session drops every handle it issued.

use std::collections::{HashMap, VecDeque};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use candle_core::Tensor;
use clsm_core::sampler::{generate, interpolate_contextual, latent_to_vec, DecodeStrategy};
use clsm_core::{ClsmError, Context, TargetSpan, Token, TokenSeq};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::served::ServedModel;

/// Handles kept per session; the oldest is dropped beyond this.
pub const MAX_HANDLES: usize = 256;
pub const MAX_J: usize = 64;

#[derive(Clone, Debug)]
pub struct ServeOptions {
    /// Idle time after which a session is forgotten.
    pub ttl: Duration,
    /// Seed for sessions that do not bring their own.
    pub seed: u64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { ttl: Duration::from_secs(3600), seed: 0 }
    }
}

struct Session {
    window: TokenSeq,
    context: Context,
    seed: u64,
    requests: u64,
    handles: VecDeque<(String, Tensor)>,
    last_used: Instant,
}

impl Session {
    fn next_seed(&mut self, requested: Option<u64>) -> u64 {
        self.requests += 1;
        requested.unwrap_or_else(|| self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.requests))
    }

    fn latent(&self, handle: &str) -> Result<Tensor, ApiError> {
        self.handles
            .iter()
            .find(|(h, _)| h == handle)
            .map(|(_, z)| z.clone())
            .ok_or_else(|| ApiError::NotFound(format!("unknown z handle {handle:?}")))
    }

    /// Register `z` and return its handle. Handles are derived from the
    /// latent's value so identical requests produce identical responses.
    fn remember(&mut self, z: Tensor) -> Result<String, ApiError> {
        let values = latent_to_vec(&z)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ApiError::Internal("latent is not finite".into()));
        }
        let mut h = DefaultHasher::new();
        for v in &values {
            v.to_bits().hash(&mut h);
        }
        let handle = format!("z-{:016x}", h.finish());
        if !self.handles.iter().any(|(k, _)| *k == handle) {
            if self.handles.len() == MAX_HANDLES {
                self.handles.pop_front();
            }
            self.handles.push_back((handle.clone(), z));
        }
        Ok(handle)
    }
}

pub struct AppState {
    model: ServedModel,
    version: String,
    opts: ServeOptions,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(model: ServedModel, version: impl Into<String>, opts: ServeOptions) -> Arc<Self> {
        Arc::new(Self { model, version: version.into(), opts, sessions: Mutex::new(HashMap::new()) })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let mut map = self.sessions.lock().expect("session map poisoned");
        let ttl = self.opts.ttl;
        map.retain(|_, s| s.try_lock().map(|s| s.last_used.elapsed() <= ttl).unwrap_or(true));
        map.get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
    }

    fn context(&self, window: &[Token], span: TargetSpan) -> Result<Context, ApiError> {
        let k = self.model.model().window_len();
        if window.len() != k {
            return Err(ApiError::BadRequest(format!("window has {} tokens, the model expects {k}", window.len())));
        }
        let span = self.model.check_span(span)?;
        Ok(Context::from_window(window, span)?)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Internal(String),
}

impl From<ClsmError> for ApiError {
    fn from(e: ClsmError) -> Self {
        match e {
            ClsmError::InvalidSpan(_)
            | ClsmError::OutOfRange(_)
            | ClsmError::InvalidToken(_)
            | ClsmError::InvalidInput(_)
            | ClsmError::InvalidConfig(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, reason) = match self {
            ApiError::BadRequest(r) => (StatusCode::BAD_REQUEST, r),
            ApiError::NotFound(r) => (StatusCode::NOT_FOUND, r),
            ApiError::Internal(r) => (StatusCode::INTERNAL_SERVER_ERROR, r),
        };
        (status, Json(json!({ "error": reason }))).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed request: {e}")))
}

/// Run model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

fn strategy(temperature: Option<f64>, seed: u64) -> Result<DecodeStrategy, ApiError> {
    match temperature {
        None => Ok(DecodeStrategy::Greedy),
        Some(t) if t > 0.0 && t.is_finite() => Ok(DecodeStrategy::Sample { temperature: t, seed }),
        Some(t) => Err(ApiError::BadRequest(format!("temperature {t} must be finite and > 0"))),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub window: TokenSeq,
    pub span: TargetSpan,
    pub seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateSession {
    pub window: Option<TokenSeq>,
    pub span: Option<TargetSpan>,
}

#[derive(Serialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub window: TokenSeq,
    pub span: TargetSpan,
    /// Handles dropped by this request.
    pub invalidated: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub session_id: String,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeRequest {
    pub session_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub session_id: String,
    pub from: String,
    pub to: String,
    #[serde(alias = "J")]
    pub j: usize,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaryRequest {
    pub session_id: String,
    pub z_handle: String,
    pub delta: f64,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
}

/// A decoded window with the handle of the latent behind it.
#[derive(Serialize)]
pub struct Candidate {
    pub z_handle: String,
    pub tokens: TokenSeq,
    pub target: TokenSeq,
}

#[derive(Serialize)]
pub struct InterpolateResponse {
    pub alphas: Vec<f64>,
    pub sequences: Vec<TokenSeq>,
}

fn target_of(seq: &[Token], span: TargetSpan) -> TokenSeq {
    seq[span.start..span.end()].to_vec()
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let m = st.model.model();
    Json(json!({
        "status": "ok",
        "model_version": st.version,
        "model_kind": st.model.kind(),
        "d_z": m.latent_dim(),
        "window": m.window_len(),
        "grid": st.model.grid(),
    }))
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionInfo>, ApiError> {
    let req: CreateSession = parse(&body)?;
    let context = st.context(&req.window, req.span)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session {
        window: req.window.clone(),
        context,
        seed: req.seed.unwrap_or(st.opts.seed),
        requests: 0,
        handles: VecDeque::new(),
        last_used: Instant::now(),
    };
    st.sessions.lock().expect("session map poisoned").insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(SessionInfo { session_id: id, window: req.window, span: req.span, invalidated: 0 }))
}

async fn update_session(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionInfo>, ApiError> {
    let req: UpdateSession = parse(&body)?;
    let cell = st.session(&id)?;
    let mut s = cell.lock().expect("session poisoned");
    let window = req.window.unwrap_or_else(|| s.window.clone());
    let span = req.span.unwrap_or(s.context.span);
    let context = st.context(&window, span)?;
    let changed = window != s.window || context != s.context;
    let invalidated = if changed { s.handles.len() } else { 0 };
    if changed {
        s.handles.clear();
        s.window = window;
        s.context = context;
    }
    s.last_used = Instant::now();
    Ok(Json(SessionInfo { session_id: id, window: s.window.clone(), span, invalidated }))
}

async fn delete_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    st.session(&id)?;
    st.sessions.lock().expect("session map poisoned").remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

async fn generate_handler(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<Candidate>, ApiError> {
    let req: GenerateRequest = parse(&body)?;
    let cell = st.session(&req.session_id)?;
    blocking(move || {
        let mut s = cell.lock().expect("session poisoned");
        s.last_used = Instant::now();
        let seed = s.next_seed(req.seed);
        let model = st.model.model();
        let z = model.sample_latent(&s.context, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let handle = s.remember(z.clone())?;
        let tokens = generate(model, &z, &s.context, strategy(req.temperature, seed)?)?;
        Ok(Json(Candidate { z_handle: handle, target: target_of(&tokens, s.context.span), tokens }))
    })
    .await
}

async fn encode_handler(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<Candidate>, ApiError> {
    let req: EncodeRequest = parse(&body)?;
    let cell = st.session(&req.session_id)?;
    blocking(move || {
        let mut s = cell.lock().expect("session poisoned");
        s.last_used = Instant::now();
        let model = st.model.model();
        let z = model.posterior_mean(&s.window, s.context.span)?;
        let handle = s.remember(z.clone())?;
        let tokens = generate(model, &z, &s.context, DecodeStrategy::Greedy)?;
        Ok(Json(Candidate { z_handle: handle, target: target_of(&tokens, s.context.span), tokens }))
    })
    .await
}

async fn interpolate_handler(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<InterpolateResponse>, ApiError> {
    let req: InterpolateRequest = parse(&body)?;
    if req.j == 0 || req.j > MAX_J {
        return Err(ApiError::BadRequest(format!("J must be in 1..={MAX_J}")));
    }
    let cell = st.session(&req.session_id)?;
    blocking(move || {
        let mut s = cell.lock().expect("session poisoned");
        s.last_used = Instant::now();
        let (z1, z2) = (s.latent(&req.from)?, s.latent(&req.to)?);
        let seed = s.next_seed(req.seed);
        let (_, sequences) =
            interpolate_contextual(st.model.model(), &z1, &z2, req.j, &s.context, strategy(req.temperature, seed)?)?;
        let alphas = (0..=req.j).map(|k| k as f64 / req.j as f64).collect();
        Ok(Json(InterpolateResponse { alphas, sequences }))
    })
    .await
}

async fn vary_handler(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<Candidate>, ApiError> {
    let req: VaryRequest = parse(&body)?;
    if !(req.delta >= 0.0 && req.delta.is_finite()) {
        return Err(ApiError::BadRequest(format!("delta {} must be finite and >= 0", req.delta)));
    }
    let cell = st.session(&req.session_id)?;
    blocking(move || {
        let mut s = cell.lock().expect("session poisoned");
        s.last_used = Instant::now();
        let z = s.latent(&req.z_handle)?;
        let seed = s.next_seed(req.seed);
        let model = st.model.model();
        let zv = model.vary_latent(&z, req.delta, &s.context, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let handle = s.remember(zv.clone())?;
        let tokens = generate(model, &zv, &s.context, strategy(req.temperature, seed)?)?;
        Ok(Json(Candidate { z_handle: handle, target: target_of(&tokens, s.context.span), tokens }))
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session", post(create_session))
        .route("/session/{id}", axum::routing::put(update_session).delete(delete_session))
        .route("/encode", post(encode_handler))
        .route("/generate", post(generate_handler))
        .route("/interpolate", post(interpolate_handler))
        .route("/vary", post(vary_handler))
        .with_state(state)
}

/// Serve until interrupted.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
