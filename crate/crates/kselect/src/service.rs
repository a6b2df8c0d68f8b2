//! HTTP JSON service for interactive inference under `/v1`.
//!
//! Knowledge positions and stage numbers are 1-based on the wire. Errors
//! are `{"error": string, "code": int}` and every success body carries
//! the checkpoint hash.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kselect_core::{Action, DialogueSample};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::checkpoint::Checkpoint;
use crate::config::{DecodeConfig, DecodeMode, TrainConfig};
use crate::dialogue;
use crate::trainer::{self, EpisodeTrace, Plan};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct ErrorBody {
    pub error: String,
    pub code: u16,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.message, code: self.status.as_u16() };
        (self.status, Json(body)).into_response()
    }
}

impl From<crate::Error> for ApiError {
    fn from(e: crate::Error) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Model,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

struct Session {
    turns: Vec<Turn>,
    history: Vec<Vec<u32>>,
    knowledge_text: Vec<String>,
    knowledge: Vec<Vec<u32>>,
    o: usize,
    decode: DecodeConfig,
}

pub struct AppState {
    checkpoint: Checkpoint,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(checkpoint: Checkpoint) -> Arc<Self> {
        Arc::new(AppState { checkpoint, sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1) })
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub knowledge: Vec<String>,
    pub o: Option<usize>,
    /// Beam width; greedy decoding when absent.
    pub beam: Option<usize>,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct Created {
    pub session_id: String,
    pub o: usize,
    pub knowledge: usize,
    pub checkpoint: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Message {
    pub text: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIf {
    pub text: String,
    /// 1-based pool positions in selection order.
    pub forced_knowledge: Vec<usize>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct StageView {
    /// 1-based.
    pub stage: usize,
    /// Over the pool in order, then STOP.
    pub probabilities: Vec<f64>,
    /// 1-based pool position; absent for STOP.
    pub chosen: Option<usize>,
    pub stop: bool,
    pub snippet: Option<String>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SelectionTrace {
    pub stages: Vec<StageView>,
    pub response: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Reply {
    pub response: String,
    pub trace: SelectionTrace,
    pub checkpoint: String,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct SessionView {
    pub session_id: String,
    pub knowledge: Vec<String>,
    pub history: Vec<Turn>,
    pub o: usize,
    pub beam: Option<usize>,
    pub checkpoint: String,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct Health {
    pub status: String,
    pub checkpoint: String,
    pub train_o: usize,
}

fn bad(message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, message)
}

async fn create(State(app): State<Arc<AppState>>, body: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<(StatusCode, Json<Created>)> {
    let Json(req) = body?;
    if req.knowledge.is_empty() {
        return Err(bad("knowledge pool is empty"));
    }
    let ck = &app.checkpoint;
    let mut knowledge = Vec::with_capacity(req.knowledge.len());
    for (i, doc) in req.knowledge.iter().enumerate() {
        let mut ids = ck.vocab.encode(doc);
        if ids.is_empty() {
            return Err(bad(format!("knowledge document {} is empty", i + 1)));
        }
        ids.truncate(ck.train.lengths.max_knowledge);
        knowledge.push(ids);
    }
    let o = req.o.unwrap_or(ck.train.o);
    if o == 0 {
        return Err(bad("o must be at least 1"));
    }
    let max_len = ck.train.lengths.max_response;
    let decode = match req.beam {
        None => DecodeConfig::greedy(max_len),
        Some(w) if (1..=DecodeConfig::MAX_BEAM).contains(&w) => DecodeConfig::beam(w, max_len),
        Some(w) => return Err(bad(format!("beam = {w} outside 1..={}", DecodeConfig::MAX_BEAM))),
    };
    let id = format!("s{:06}", app.next_id.fetch_add(1, Ordering::Relaxed));
    let r = knowledge.len();
    let session = Session { turns: Vec::new(), history: Vec::new(), knowledge_text: req.knowledge, knowledge, o, decode };
    app.sessions.lock().expect("session table").insert(id.clone(), Arc::new(Mutex::new(session)));
    tracing::info!(session = %id, r, o, "session created");
    Ok((StatusCode::CREATED, Json(Created { session_id: id, o, knowledge: r, checkpoint: ck.hash.clone() })))
}

fn trace_view(session: &Session, trace: &EpisodeTrace, response: String) -> SelectionTrace {
    let stages = trace
        .stages
        .iter()
        .map(|s| {
            let chosen = match s.action {
                Action::Select(i) => Some(i),
                Action::Stop => None,
            };
            StageView {
                stage: s.stage + 1,
                probabilities: s.distribution.probs().to_vec(),
                chosen: chosen.map(|i| i + 1),
                stop: chosen.is_none(),
                snippet: chosen.map(|i| session.knowledge_text[i].clone()),
            }
        })
        .collect();
    SelectionTrace { stages, response }
}

/// One inference episode on the session history plus `text`.
fn answer(ck: &Checkpoint, session: &Session, text: &str, forced: Option<&[usize]>) -> crate::Result<(Vec<u32>, SelectionTrace)> {
    let mut history = session.history.clone();
    history.push(ck.vocab.encode(text));
    let sample = DialogueSample { history, knowledge: session.knowledge.clone(), response: Vec::new(), gold_knowledge: None };
    let cfg = TrainConfig { o: session.o, ..ck.train.clone() };
    let plans = forced.map(|f| vec![Plan::forced(f.iter().map(|&i| Action::Select(i)).collect())]);
    let trace = trainer::infer(&ck.model, &[&sample], &cfg, plans.as_deref())?.remove(0);
    let memory = trace.final_memory.as_ref().expect("inference keeps the final memory");
    let tokens = dialogue::generate(&ck.model, memory, &session.decode)?;
    let response = ck.vocab.decode(&tokens);
    let view = trace_view(session, &trace, response);
    Ok((tokens, view))
}

fn check_text(text: &str) -> ApiResult<()> {
    if text.trim().is_empty() {
        Err(bad("text is empty"))
    } else {
        Ok(())
    }
}

async fn message(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<Message>, JsonRejection>,
) -> ApiResult<Json<Reply>> {
    let session = app.session(&id)?;
    let Json(req) = body?;
    check_text(&req.text)?;
    let app2 = app.clone();
    let reply = tokio::task::spawn_blocking(move || -> ApiResult<Reply> {
        let ck = &app2.checkpoint;
        let mut s = session.lock().expect("session");
        let (tokens, trace) = answer(ck, &s, &req.text, None)?;
        s.history.push(ck.vocab.encode(&req.text));
        if !tokens.is_empty() {
            s.history.push(tokens);
        }
        s.turns.push(Turn { speaker: Speaker::User, text: req.text });
        s.turns.push(Turn { speaker: Speaker::Model, text: trace.response.clone() });
        Ok(Reply { response: trace.response.clone(), trace, checkpoint: ck.hash.clone() })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(reply))
}

async fn whatif(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<WhatIf>, JsonRejection>,
) -> ApiResult<Json<Reply>> {
    let session = app.session(&id)?;
    let Json(req) = body?;
    check_text(&req.text)?;
    let app2 = app.clone();
    let reply = tokio::task::spawn_blocking(move || -> ApiResult<Reply> {
        let ck = &app2.checkpoint;
        let s = session.lock().expect("session");
        let r = s.knowledge.len();
        let invalid = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
        if req.forced_knowledge.is_empty() {
            return Err(invalid("forced_knowledge is empty".into()));
        }
        let mut forced = Vec::with_capacity(req.forced_knowledge.len());
        for &k in &req.forced_knowledge {
            if k == 0 || k > r {
                return Err(invalid(format!("forced index {k} outside 1..={r}")));
            }
            if forced.contains(&(k - 1)) {
                return Err(invalid(format!("forced index {k} repeated")));
            }
            forced.push(k - 1);
        }
        let (_, trace) = answer(ck, &s, &req.text, Some(&forced))?;
        Ok(Reply { response: trace.response.clone(), trace, checkpoint: ck.hash.clone() })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(reply))
}

async fn show(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let session = app.session(&id)?;
    let s = session.lock().expect("session");
    Ok(Json(SessionView {
        session_id: id,
        knowledge: s.knowledge_text.clone(),
        history: s.turns.clone(),
        o: s.o,
        beam: (s.decode.mode == DecodeMode::Beam).then_some(s.decode.beam_width),
        checkpoint: app.checkpoint.hash.clone(),
    }))
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Health> {
    Json(Health { status: "ok".into(), checkpoint: app.checkpoint.hash.clone(), train_o: app.checkpoint.train.o })
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(show))
        .route("/v1/sessions/{id}/message", post(message))
        .route("/v1/sessions/{id}/whatif", post(whatif))
        .fallback(not_found)
        .layer(CorsLayer::permissive())
        .with_state(app)
}

pub async fn serve(checkpoint: Checkpoint, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, checkpoint = %checkpoint.hash, "serving");
    axum::serve(listener, router(AppState::new(checkpoint))).await
}
