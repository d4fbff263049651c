use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dualsdf_core::manipulate::{ManipulationObjective, RegConfig, Session, INTERACTIVE_MAX_STEPS};
use dualsdf_core::render::{render_image, RenderSettings};
use dualsdf_core::vad::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::{broadcast, Semaphore};
use tower_http::services::ServeDir;

use crate::{
    encode_png, view_camera, wire_primitives, Model, RenderLevel, ServiceConfig, ServiceError, SessionMessage,
    SUBPROTOCOL,
};

/// Upper bounds on per-request work.
const MAX_RENDER_SIDE: usize = 2048;
const MAX_RENDER_STEPS: usize = 1024;
const MAX_OBJECTIVE_STEPS: usize = 1000;

const UI_PLACEHOLDER: &str = "<!doctype html><title>dualsdf</title><p>No UI bundle is configured. Set <code>ui_dir</code> in the service config.</p>\n";

struct SessionSlot {
    session: Mutex<Session>,
    tx: broadcast::Sender<SessionMessage>,
    last_used: Mutex<Instant>,
    /// Latest fine render request; older queued requests give up.
    render_generation: AtomicU64,
}

impl SessionSlot {
    fn touch(&self) {
        *self.last_used.lock().unwrap() = Instant::now();
    }
}

pub struct AppState {
    model: Arc<Model>,
    config: ServiceConfig,
    reg: RegConfig,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
    fine_renders: Semaphore,
    random_draws: AtomicU64,
}

impl AppState {
    pub fn new(model: Model, config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        config.validate()?;
        let reg = config
            .manipulation
            .clone()
            .unwrap_or_else(|| RegConfig::for_latent_dim(model.config.latent_dim));
        Ok(Arc::new(AppState {
            fine_renders: Semaphore::new(config.render_workers),
            model: Arc::new(model),
            reg,
            config,
            sessions: Mutex::new(HashMap::new()),
            random_draws: AtomicU64::new(0),
        }))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn slot(&self, id: &str) -> Option<Arc<SessionSlot>> {
        let slot = self.sessions.lock().unwrap().get(id).cloned();
        if let Some(s) = &slot {
            s.touch();
        }
        slot
    }

    /// Drops sessions idle for longer than the configured timeout.
    pub fn reap_idle(&self) -> usize {
        let limit = Duration::from_secs(self.config.idle_timeout_secs);
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, s| s.last_used.lock().unwrap().elapsed() < limit);
        before - map.len()
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn field_error(path: &str, message: impl Into<String>) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(json!({ "error": message.into(), "path": path })),
    )
        .into_response()
}

fn unknown_session(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
}

/// Parses JSON, reporting the failing field path on error.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, Response> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        field_error(&path, e.inner().to_string())
    })
}

fn snapshot(model: &Model, id: &str, session: &Session) -> Result<SessionMessage, dualsdf_core::Error> {
    let set = model.decoders.primitive_set(session.z())?;
    let last = session.history().last();
    Ok(SessionMessage::PrimitivesUpdate {
        session_id: id.to_string(),
        step: last.map_or(0, |r| r.step),
        l_man: last.map(|r| r.l_man),
        l_reg: last.map(|r| r.l_reg),
        primitive_kind: set.kind(),
        primitives: wire_primitives(&set),
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Source {
    Named(String),
    Latent(Vec<f64>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    source: Source,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: CreateSession = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let l = app.model.config.latent_dim;
    let z0 = match req.source {
        Source::Named(name) if name == "random" => {
            let draw = app.random_draws.fetch_add(1, Ordering::Relaxed);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(app.config.seed, draw));
            (0..l).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
        }
        Source::Named(name) => match app.model.latent(&name) {
            Some(z) => z.to_vec(),
            None => return error(StatusCode::NOT_FOUND, format!("unknown shape `{name}`")),
        },
        Source::Latent(z) => {
            if z.len() != l {
                return field_error("source", format!("latent needs {l} values, got {}", z.len()));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return field_error("source", "latent values must be finite");
            }
            z
        }
    };
    let id = uuid::Uuid::new_v4().to_string();
    let session = match Session::new(id.clone(), z0) {
        Ok(s) => s,
        Err(e) => return field_error("source", e.to_string()),
    };
    let first = match snapshot(&app.model, &id, &session) {
        Ok(m) => m,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    {
        let mut map = app.sessions.lock().unwrap();
        if map.len() >= app.config.max_sessions {
            return error(
                StatusCode::TOO_MANY_REQUESTS,
                format!("session limit of {} reached", app.config.max_sessions),
            );
        }
        let (tx, _) = broadcast::channel(256);
        map.insert(
            id.clone(),
            Arc::new(SessionSlot {
                session: Mutex::new(session),
                tx,
                last_used: Mutex::new(Instant::now()),
                render_generation: AtomicU64::new(0),
            }),
        );
    }
    let SessionMessage::PrimitivesUpdate {
        primitive_kind,
        primitives,
        ..
    } = first
    else {
        unreachable!("snapshot builds a primitives update")
    };
    (
        StatusCode::CREATED,
        Json(json!({ "session_id": id, "primitive_kind": primitive_kind, "primitives": primitives })),
    )
        .into_response()
}

async fn get_primitives(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let Some(slot) = app.slot(&id) else {
        return unknown_session(&id);
    };
    let msg = {
        let session = slot.session.lock().unwrap();
        snapshot(&app.model, &id, &session)
    };
    match msg {
        Ok(m) => Json(m).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectiveRequest {
    objective: ManipulationObjective,
    #[serde(default)]
    max_steps: Option<usize>,
}

/// Runs one objective on a session, streaming each accepted step.
fn run_objective(app: &AppState, id: &str, slot: &SessionSlot, objective: &ManipulationObjective, max_steps: usize) {
    let mut session = slot.session.lock().unwrap();
    let send = |m| {
        // No subscribers is fine.
        let _ = slot.tx.send(m);
    };
    let mut initial = None;
    let mut taken = 0;
    let mut last = None;
    while taken < max_steps {
        let outcome = match session.run(&app.model.decoders, objective, &app.reg, 1) {
            Ok(o) => o,
            Err(e) => {
                send(SessionMessage::Error {
                    session_id: id.to_string(),
                    message: e.to_string(),
                });
                return;
            }
        };
        initial.get_or_insert(outcome.initial_l_man);
        taken += outcome.steps;
        if outcome.steps > 0 {
            match snapshot(&app.model, id, &session) {
                Ok(m) => send(m),
                Err(e) => {
                    send(SessionMessage::Error {
                        session_id: id.to_string(),
                        message: e.to_string(),
                    });
                    return;
                }
            }
        }
        let done = outcome.stop != dualsdf_core::manipulate::StopReason::MaxSteps;
        last = Some(outcome);
        if done {
            break;
        }
    }
    if let Some(o) = last {
        let step = session.history().last().map_or(0, |r| r.step);
        send(SessionMessage::StepReport {
            session_id: id.to_string(),
            step,
            steps: taken,
            initial_l_man: initial.unwrap_or(o.final_l_man),
            l_man: o.final_l_man,
            l_reg: o.final_l_reg,
            stop: o.stop,
        });
    }
}

async fn post_objective(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    let Some(slot) = app.slot(&id) else {
        return unknown_session(&id);
    };
    let req: ObjectiveRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let cfg = &app.model.config;
    if let Err(e) = req.objective.validate(cfg.primitive_kind, cfg.n_primitives) {
        return field_error(&format!("objective.{}", e.path), e.message);
    }
    let max_steps = req.max_steps.unwrap_or(INTERACTIVE_MAX_STEPS);
    if max_steps == 0 || max_steps > MAX_OBJECTIVE_STEPS {
        return field_error("max_steps", format!("must lie in 1..={MAX_OBJECTIVE_STEPS}"));
    }
    let worker_app = app.clone();
    let worker_id = id.clone();
    tokio::task::spawn_blocking(move || run_objective(&worker_app, &worker_id, &slot, &req.objective, max_steps));
    (
        StatusCode::ACCEPTED,
        Json(json!({ "session_id": id, "max_steps": max_steps })),
    )
        .into_response()
}

#[derive(Deserialize)]
struct RenderQuery {
    level: Option<RenderLevel>,
    w: Option<usize>,
    h: Option<usize>,
    steps: Option<usize>,
}

async fn render(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    query: Result<Query<RenderQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    let Some(slot) = app.slot(&id) else {
        return unknown_session(&id);
    };
    let Query(q) = match query {
        Ok(q) => q,
        Err(e) => return field_error("query", e.body_text()),
    };
    let level = q.level.unwrap_or(RenderLevel::Coarse);
    let c = &app.config;
    let (dw, dh, ds) = match level {
        RenderLevel::Coarse => (c.preview_width, c.preview_height, c.preview_steps),
        RenderLevel::Fine => (c.final_width, c.final_height, c.final_steps),
    };
    let (w, h, steps) = (q.w.unwrap_or(dw), q.h.unwrap_or(dh), q.steps.unwrap_or(ds));
    for (name, v, max) in [("w", w, MAX_RENDER_SIDE), ("h", h, MAX_RENDER_SIDE), ("steps", steps, MAX_RENDER_STEPS)] {
        if v == 0 || v > max {
            return field_error(name, format!("must lie in 1..={max}"));
        }
    }

    let _permit = if level == RenderLevel::Fine {
        let generation = slot.render_generation.fetch_add(1, Ordering::SeqCst) + 1;
        let permit = app.fine_renders.acquire().await.expect("semaphore is never closed");
        if slot.render_generation.load(Ordering::SeqCst) != generation {
            return error(StatusCode::CONFLICT, "superseded by a newer render request");
        }
        Some(permit)
    } else {
        None
    };

    let (z, step) = {
        let s = slot.session.lock().unwrap();
        (s.z().to_vec(), s.history().last().map_or(0, |r| r.step))
    };
    let model = app.model.clone();
    let rendered = tokio::task::spawn_blocking(move || -> dualsdf_core::Result<Vec<u8>> {
        let camera = view_camera(w, h);
        let image = match level {
            RenderLevel::Coarse => {
                let field = model.decoders.coarse_field(&z)?;
                render_image(&field, &camera, &RenderSettings::default().with_steps(steps))?
            }
            RenderLevel::Fine => {
                let field = model.decoders.fine_field(&z)?;
                render_image(&field, &camera, &RenderSettings::default().for_neural_field().with_steps(steps))?
            }
        };
        Ok(encode_png(&image))
    })
    .await;
    match rendered {
        Ok(Ok(bytes)) => {
            let _ = slot.tx.send(SessionMessage::RenderReady {
                session_id: id,
                step,
                level,
                width: w,
                height: h,
            });
            ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}")),
    }
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match app.sessions.lock().unwrap().remove(&id) {
        Some(_) => StatusCode::NO_CONTENT.into_response(),
        None => unknown_session(&id),
    }
}

async fn list_shapes(State(app): State<Arc<AppState>>) -> Response {
    let cfg = &app.model.config;
    Json(json!({
        "shapes": app.model.shapes.iter().map(|(id, _)| json!({ "id": id })).collect::<Vec<_>>(),
        "primitive_kind": cfg.primitive_kind,
        "n_primitives": cfg.n_primitives,
        "latent_dim": cfg.latent_dim,
    }))
    .into_response()
}

async fn healthz(State(app): State<Arc<AppState>>) -> Response {
    Json(json!({ "status": "ok", "sessions": app.session_count() })).into_response()
}

fn offers_subprotocol(headers: &HeaderMap) -> bool {
    headers
        .get_all(header::SEC_WEBSOCKET_PROTOCOL)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .any(|p| p.trim() == SUBPROTOCOL)
}

async fn session_ws(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    ws: WebSocketUpgrade,
) -> Response {
    let Some(slot) = app.slot(&id) else {
        return unknown_session(&id);
    };
    if !offers_subprotocol(&headers) {
        return error(StatusCode::BAD_REQUEST, format!("the `{SUBPROTOCOL}` subprotocol is required"));
    }
    ws.protocols([SUBPROTOCOL])
        .on_upgrade(move |socket| stream_session(app, id, slot, socket))
}

async fn send_json(socket: &mut WebSocket, msg: &SessionMessage) -> bool {
    match serde_json::to_string(msg) {
        Ok(text) => socket.send(Message::Text(text.into())).await.is_ok(),
        Err(_) => false,
    }
}

/// Forwards session frames, dropping primitive updates that would move the
/// step index backwards for this client.
async fn stream_session(app: Arc<AppState>, id: String, slot: Arc<SessionSlot>, mut socket: WebSocket) {
    let mut rx = slot.tx.subscribe();
    let first = {
        let s = slot.session.lock().unwrap();
        snapshot(&app.model, &id, &s)
    };
    drop(slot);
    let Ok(first) = first else { return };
    let mut last_step = first.step().unwrap_or(0);
    if !send_json(&mut socket, &first).await {
        return;
    }
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(m) => {
                    if let SessionMessage::PrimitivesUpdate { step, .. } = &m {
                        if *step <= last_step {
                            continue;
                        }
                        last_step = *step;
                    }
                    if !send_json(&mut socket, &m).await {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/primitives", get(get_primitives))
        .route("/sessions/{id}/objective", post(post_objective))
        .route("/sessions/{id}/render", get(render))
        .route("/sessions/{id}/ws", get(session_ws))
        .route("/shapes", get(list_shapes))
        .route("/healthz", get(healthz));
    let api = match app.config.ui_dir.clone() {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api
            .route("/ui", get(|| async { Html(UI_PLACEHOLDER) }))
            .route("/ui/", get(|| async { Html(UI_PLACEHOLDER) })),
    };
    api.with_state(app)
}

/// Loads the model, binds and serves until the process ends.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let model = Model::load(&config.checkpoint)?;
    let addr: SocketAddr = config.bind.parse().map_err(|e| ServiceError::Config {
        path: config.checkpoint.clone(),
        message: format!("bind address `{}`: {e}", config.bind),
    })?;
    let app = AppState::new(model, config)?;
    let reaper = app.clone();
    let period = Duration::from_secs((app.config.idle_timeout_secs / 4).max(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = reaper.reap_idle();
            if n > 0 {
                tracing::info!(reaped = n, "closed idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(app)).await?;
    Ok(())
}
