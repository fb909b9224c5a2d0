//! HTTP session server.
//!
//! Each session owns one simulated world with its detector and tracker. All
//! mutations of a session go through its mutex, from request handlers and
//! from the session's clock task alike, so they are applied one at a time in
//! arrival order. Clients follow a session through a server-sent event
//! stream carrying log records (`message`, `ride_event`, `plan`, `rejection`)
//! and world snapshots.
//!
//! Request and response bodies are JSON. Errors are `{"code", "message"}`
//! with a machine-readable `code`.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, Weak};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;
use tokio::time::Instant;
use ubn_core::engine::{
    command_error_code, start_scenario, EngineConfig, Place, Scenario, ScenarioError, ScriptedRun, Session,
};
use ubn_core::network::{Seconds, TransitNetwork};
use ubn_core::planner::{PlanError, TripPlan};
use ubn_core::sim::{PassengerCommand, SimConfig};
use ubn_core::trace::{to_jsonl, TraceEvent};
use ubn_core::tracker::ReplanChoice;

pub const MAX_SPEED: f64 = 1000.0;
pub const MAX_ADVANCE_S: Seconds = 86_400;
/// World snapshots go out at most this often on a session's stream.
pub const SNAPSHOT_INTERVAL: Duration = Duration::from_millis(500);
/// Scripted sessions yield to other tasks after this many ticks.
const SCRIPTED_BATCH: usize = 20;
const STREAM_CAPACITY: usize = 4096;

pub struct ServerConfig {
    pub network: Arc<TransitNetwork>,
    /// Scenarios sessions can be created from, looked up by name.
    pub scenarios: Vec<Scenario>,
    pub default_speed: f64,
    pub log_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

struct Shared {
    config: ServerConfig,
    sessions: Mutex<BTreeMap<String, Arc<SessionHandle>>>,
}

struct SessionHandle {
    id: String,
    live: tokio::sync::Mutex<Live>,
}

enum Mode {
    Interactive,
    Scripted { run: Box<ScriptedRun>, finished: bool },
}

struct Live {
    session: Session,
    mode: Mode,
    scenario: Option<String>,
    paused: bool,
    speed: f64,
    last_plan: Option<TripPlan>,
    /// Log records before this index have been offered to the stream.
    published: usize,
    /// `None` once the session is closed; dropping it ends every stream.
    tx: Option<broadcast::Sender<StreamItem>>,
    last_snapshot: Option<Instant>,
}

#[derive(Debug, Clone)]
struct StreamItem {
    /// Log index, for records; lets a client resume after a drop.
    id: Option<usize>,
    event: &'static str,
    data: String,
}

impl StreamItem {
    fn into_event(self) -> Event {
        let e = Event::default().event(self.event).data(self.data);
        match self.id {
            Some(id) => e.id(id.to_string()),
            None => e,
        }
    }
}

fn streamed_kind(e: &TraceEvent) -> bool {
    matches!(e, TraceEvent::Message(_) | TraceEvent::RideEvent(_) | TraceEvent::Plan(_) | TraceEvent::Rejection(_))
}

impl Live {
    fn stream_items(&self, from: usize, to: usize) -> impl Iterator<Item = StreamItem> + '_ {
        self.session.log()[from..to]
            .iter()
            .enumerate()
            .filter(|(_, r)| streamed_kind(&r.event))
            .map(move |(i, r)| StreamItem { id: Some(from + i), event: r.event.kind(), data: r.to_line() })
    }

    /// Sends new log records, then a snapshot if one is due.
    fn publish(&mut self) {
        let end = self.session.log().len();
        if let Some(tx) = &self.tx {
            for item in self.stream_items(self.published, end) {
                let _ = tx.send(item);
            }
        }
        self.published = end;
        let due = self.last_snapshot.is_none_or(|at| at.elapsed() >= SNAPSHOT_INTERVAL);
        if due {
            if let Some(tx) = &self.tx {
                let data = json!({"t": self.session.now(), "kind": "snapshot", "payload": self.session.snapshot()});
                let _ = tx.send(StreamItem { id: None, event: "snapshot", data: data.to_string() });
            }
            self.last_snapshot = Some(Instant::now());
        }
    }

    fn period(&self) -> Duration {
        let tick = self.session.world().config().tick.max(1);
        Duration::from_secs_f64(f64::from(tick) / self.speed)
    }

    /// One turn of the clock task. Returns how long to wait before the next
    /// turn, or `None` when there is nothing left to run.
    fn turn(&mut self) -> Option<Duration> {
        if self.paused {
            return Some(self.period().min(Duration::from_millis(200)));
        }
        match &mut self.mode {
            Mode::Interactive => {
                self.session.step();
                self.publish();
                Some(self.period())
            }
            Mode::Scripted { finished: true, .. } => None,
            Mode::Scripted { run, finished } => {
                for _ in 0..SCRIPTED_BATCH {
                    match run.step(&mut self.session) {
                        Ok(true) => {}
                        Ok(false) => {
                            *finished = true;
                            break;
                        }
                        Err(e) => {
                            log::error!("scripted run stopped: {e}");
                            *finished = true;
                            break;
                        }
                    }
                }
                self.publish();
                Some(Duration::ZERO)
            }
        }
    }

    fn info(&self, id: &str) -> SessionInfo {
        let (mode, finished) = match &self.mode {
            Mode::Interactive => ("interactive", None),
            Mode::Scripted { finished, .. } => ("scripted", Some(*finished)),
        };
        SessionInfo {
            session_id: id.to_string(),
            mode,
            scenario: self.scenario.clone(),
            t: self.session.now(),
            speed: self.speed,
            paused: self.paused,
            finished,
            log_records: self.session.log().len(),
        }
    }

    fn require_interactive(&self) -> Result<(), ApiError> {
        match self.mode {
            Mode::Interactive => Ok(()),
            Mode::Scripted { .. } => Err(ApiError::conflict("scripted_session", "scripted sessions follow their script")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    pub t: Seconds,
    pub speed: f64,
    pub paused: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished: Option<bool>,
    pub log_records: usize,
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, code: code.to_string(), message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<ScenarioError> for ApiError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Plan(PlanError::NoRoute) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "no_route", e.to_string()),
            ScenarioError::UnknownStop(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_place", e.to_string()),
            _ => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_scenario", e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// An empty body reads as `{}`.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let text = if body.iter().all(u8::is_ascii_whitespace) { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(text).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

fn check_speed(speed: f64) -> ApiResult<f64> {
    if speed.is_finite() && speed > 0.0 && speed <= MAX_SPEED {
        Ok(speed)
    } else {
        Err(ApiError::bad_request(format!("speed must be in (0, {MAX_SPEED}], got {speed}")))
    }
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

impl AppState {
    pub fn new(config: ServerConfig) -> Self {
        AppState(Arc::new(Shared { config, sessions: Mutex::new(BTreeMap::new()) }))
    }

    fn network(&self) -> &Arc<TransitNetwork> {
        &self.0.config.network
    }

    fn session(&self, id: &str) -> ApiResult<Arc<SessionHandle>> {
        let sessions = self.0.sessions.lock().expect("session table poisoned");
        sessions.get(id).cloned().ok_or_else(|| ApiError::unknown_session(id))
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.0.sessions.lock().expect("session table poisoned").keys().cloned().collect()
    }

    async fn close(&self, handle: &SessionHandle) {
        let mut live = handle.live.lock().await;
        if live.tx.take().is_none() {
            return;
        }
        if let Some(dir) = &self.0.config.log_dir {
            let path = dir.join(format!("{}.jsonl", handle.id));
            if let Err(e) = std::fs::write(&path, to_jsonl(live.session.log())) {
                log::error!("cannot write {}: {e}", path.display());
            }
        }
    }

    /// Closes every session, writing logs if a log directory is set.
    pub async fn close_all(&self) {
        let handles: Vec<_> = {
            let mut sessions = self.0.sessions.lock().expect("session table poisoned");
            std::mem::take(&mut *sessions).into_values().collect()
        };
        for h in handles {
            self.close(&h).await;
        }
    }
}

/// The session's clock: steps interactive sessions at the chosen speed and
/// runs scripted ones flat out.
async fn drive(handle: Weak<SessionHandle>) {
    let mut next = Instant::now();
    loop {
        let wait = {
            let Some(h) = handle.upgrade() else { return };
            let mut live = h.live.lock().await;
            if live.tx.is_none() {
                return;
            }
            live.turn()
        };
        match wait {
            None => return,
            Some(d) if d.is_zero() => {
                next = Instant::now();
                tokio::task::yield_now().await;
            }
            Some(d) => {
                next = (next + d).max(Instant::now());
                tokio::time::sleep_until(next).await;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Routes
// ---------------------------------------------------------------------------

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/network", get(get_network))
        .route("/scenarios", get(list_scenarios))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/plan", post(plan))
        .route("/sessions/{id}/tracking", post(start_tracking))
        .route("/sessions/{id}/commands", post(command))
        .route("/sessions/{id}/replan", post(replan))
        .route("/sessions/{id}/pause", post(pause))
        .route("/sessions/{id}/resume", post(resume))
        .route("/sessions/{id}/speed", post(set_speed))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/log", get(get_log))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

/// Serves until `shutdown` resolves, then closes every session so open
/// streams end and logs are written.
pub async fn serve(
    listener: tokio::net::TcpListener,
    config: ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let state = AppState::new(config);
    let closer = state.clone();
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async move {
            shutdown.await;
            closer.close_all().await;
        })
        .await?;
    state.close_all().await;
    Ok(())
}

async fn get_network(State(state): State<AppState>) -> Json<Value> {
    let network = state.network();
    let (min, max) = network.bounding_box();
    Json(json!({"bbox": {"min": min, "max": max}, "network": network.to_document()}))
}

async fn list_scenarios(State(state): State<AppState>) -> Json<Value> {
    let list: Vec<Value> = state
        .0
        .config
        .scenarios
        .iter()
        .map(|s| json!({"name": s.name, "description": s.description, "start_time": s.start_time, "end_time": s.end_time}))
        .collect();
    Json(Value::Array(list))
}

async fn list_sessions(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(state.session_ids())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CreateSession {
    scenario: Option<String>,
    mode: Option<String>,
    seed: Option<u64>,
    speed: Option<f64>,
    paused: bool,
    start_time: Option<Seconds>,
    origin: Option<Place>,
}

/// Five minutes before the first bus leaves.
fn default_start(network: &TransitNetwork) -> Seconds {
    network.runs().iter().map(|r| r.starts_at()).min().unwrap_or(0).saturating_sub(300)
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    let req: CreateSession = parse_body(&body)?;
    let speed = check_speed(req.speed.unwrap_or(state.0.config.default_speed))?;
    let network = state.network().clone();
    let scripted = match req.mode.as_deref() {
        None | Some("interactive") => false,
        Some("scripted") => true,
        Some(other) => return Err(ApiError::bad_request(format!("unknown mode {other}"))),
    };
    let (session, mode) = match &req.scenario {
        Some(name) => {
            if req.start_time.is_some() || req.origin.is_some() {
                return Err(ApiError::bad_request("start_time and origin come from the scenario"));
            }
            let scenario = state.0.config.scenarios.iter().find(|s| &s.name == name).ok_or_else(|| {
                ApiError::new(StatusCode::NOT_FOUND, "unknown_scenario", format!("no scenario {name}"))
            })?;
            let session = start_scenario(network, scenario, req.seed)?;
            let mode = if scripted {
                Mode::Scripted { run: Box::new(ScriptedRun::new(scenario)), finished: false }
            } else {
                Mode::Interactive
            };
            (session, mode)
        }
        None => {
            if scripted {
                return Err(ApiError::bad_request("scripted sessions need a scenario"));
            }
            let start = match &req.origin {
                Some(p) => p.resolve(&network).map_err(ApiError::from)?,
                None => network.stops().next().expect("networks have stops").location,
            };
            let start_time = req.start_time.unwrap_or_else(|| default_start(&network));
            let sim = SimConfig { seed: req.seed.unwrap_or(0), ..SimConfig::default() };
            let session = Session::new(network, sim, EngineConfig::default(), start_time, start)
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string()))?;
            (session, Mode::Interactive)
        }
    };
    let (tx, _) = broadcast::channel(STREAM_CAPACITY);
    let id = uuid::Uuid::new_v4().simple().to_string();
    let live = Live {
        session,
        mode,
        scenario: req.scenario.clone(),
        paused: req.paused,
        speed,
        last_plan: None,
        published: 0,
        tx: Some(tx),
        last_snapshot: None,
    };
    let info = live.info(&id);
    let handle = Arc::new(SessionHandle { id: id.clone(), live: tokio::sync::Mutex::new(live) });
    state.0.sessions.lock().expect("session table poisoned").insert(id, handle.clone());
    tokio::spawn(drive(Arc::downgrade(&handle)));
    Ok((StatusCode::CREATED, Json(info)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let handle = state.session(&id)?;
    let live = handle.live.lock().await;
    let guidance = live.session.tracker().map(|t| t.current_guidance()).unwrap_or_default();
    Ok(Json(json!({
        "session": live.info(&id),
        "snapshot": live.session.snapshot(),
        "plan": live.session.tracker().map(|t| t.plan()),
        "guidance": guidance,
    })))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let handle = state
        .0
        .sessions
        .lock()
        .expect("session table poisoned")
        .remove(&id)
        .ok_or_else(|| ApiError::unknown_session(&id))?;
    state.close(&handle).await;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanRequest {
    /// Defaults to where the passenger is.
    #[serde(default)]
    origin: Option<Place>,
    destination: Place,
}

async fn plan(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<TripPlan>> {
    let req: PlanRequest = parse_body(&body)?;
    let handle = state.session(&id)?;
    let mut live = handle.live.lock().await;
    live.require_interactive()?;
    let network = state.network();
    let origin = match &req.origin {
        Some(p) => p.resolve(network).map_err(ApiError::from)?,
        None => live.session.world().passenger().position,
    };
    let destination = req.destination.resolve(network).map_err(ApiError::from)?;
    let plan = live
        .session
        .plan(origin, destination)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "no_route", e.to_string()))?;
    live.last_plan = Some(plan.clone());
    live.publish();
    Ok(Json(plan))
}

/// Tracks the session's latest plan.
async fn start_tracking(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let handle = state.session(&id)?;
    let mut live = handle.live.lock().await;
    live.require_interactive()?;
    let plan = live.last_plan.clone().ok_or_else(|| ApiError::conflict("no_plan", "plan a trip first"))?;
    live.session.start_tracking(plan);
    live.publish();
    let guidance = live.session.tracker().map(|t| t.current_guidance()).unwrap_or_default();
    Ok(Json(json!({"t": live.session.now(), "guidance": guidance})))
}

async fn command(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let cmd: PassengerCommand = parse_body(&body)?;
    let handle = state.session(&id)?;
    let mut live = handle.live.lock().await;
    live.require_interactive()?;
    let result = live.session.command(cmd);
    live.publish();
    match result {
        Ok(()) => Ok(Json(json!({"t": live.session.now(), "accepted": true}))),
        Err(e) => Err(ApiError::conflict(command_error_code(&e), e.to_string())),
    }
}

async fn replan(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let choice: ReplanChoice = parse_body(&body)?;
    let handle = state.session(&id)?;
    let mut live = handle.live.lock().await;
    live.require_interactive()?;
    let result = live.session.respond_to_replan(choice);
    live.publish();
    match result {
        Ok(()) => Ok(Json(json!({"t": live.session.now(), "accepted": true}))),
        Err(e) => Err(ApiError::conflict("no_pending_prompt", e.to_string())),
    }
}

async fn set_paused(state: AppState, id: String, paused: bool) -> ApiResult<Json<SessionInfo>> {
    let handle = state.session(&id)?;
    let mut live = handle.live.lock().await;
    live.paused = paused;
    Ok(Json(live.info(&id)))
}

async fn pause(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    set_paused(state, id, true).await
}

async fn resume(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    set_paused(state, id, false).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeedRequest {
    speed: f64,
}

async fn set_speed(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<SessionInfo>> {
    let req: SpeedRequest = parse_body(&body)?;
    let speed = check_speed(req.speed)?;
    let handle = state.session(&id)?;
    let mut live = handle.live.lock().await;
    live.speed = speed;
    Ok(Json(live.info(&id)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdvanceRequest {
    seconds: Seconds,
}

/// Steps the world immediately, whatever the clock is doing.
async fn advance(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<SessionInfo>> {
    let req: AdvanceRequest = parse_body(&body)?;
    if req.seconds == 0 || req.seconds > MAX_ADVANCE_S {
        return Err(ApiError::bad_request(format!("seconds must be in 1..={MAX_ADVANCE_S}")));
    }
    let handle = state.session(&id)?;
    let mut live = handle.live.lock().await;
    live.require_interactive()?;
    live.session.advance(req.seconds);
    live.publish();
    Ok(Json(live.info(&id)))
}

#[derive(Debug, Default, Deserialize)]
struct EventsQuery {
    /// Resume after this log index; the whole backlog is sent otherwise.
    after: Option<usize>,
}

async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let last_event_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<usize>().ok());
    let from = q.after.or(last_event_id).map_or(0, |i| i + 1);
    let handle = state.session(&id)?;
    let (backlog, rx) = {
        let live = handle.live.lock().await;
        let Some(tx) = &live.tx else { return Err(ApiError::unknown_session(&id)) };
        let rx = tx.subscribe();
        let backlog: Vec<StreamItem> = live.stream_items(from.min(live.published), live.published).collect();
        (backlog, rx)
    };
    let live_items = stream::unfold(rx, |mut rx| async move {
        match rx.recv().await {
            Ok(item) => Some((item, rx)),
            // A client this far behind reconnects with Last-Event-ID.
            Err(broadcast::error::RecvError::Lagged(n)) => {
                log::warn!("stream dropped after lagging {n} items");
                None
            }
            Err(broadcast::error::RecvError::Closed) => None,
        }
    });
    let items = stream::iter(backlog).chain(live_items).map(|item| Ok(item.into_event()));
    Ok(Sse::new(items).keep_alive(KeepAlive::default()))
}

async fn get_log(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let handle = state.session(&id)?;
    let live = handle.live.lock().await;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], to_jsonl(live.session.log())).into_response())
}
