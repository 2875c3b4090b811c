//! Loopback HTTP control service for an identification session.
//!
//! One session at a time, one active run at a time. Every mutating request
//! commits its audit events before it answers. Live counters are pushed as
//! server-sent events from `/runs/{id}/stream`.
//!
//! | method | path                   | body / query                                   |
//! |--------|------------------------|------------------------------------------------|
//! | POST   | /session               | `logging_enabled`, `entered_now`, `source`, ... |
//! | GET    | /session               |                                                |
//! | DELETE | /session               |                                                |
//! | GET    | /plugins               |                                                |
//! | POST   | /runs                  | `plugin_id`, `params`, `escalated_from`        |
//! | POST   | /runs/{id}/stop        |                                                |
//! | POST   | /runs/{id}/rerun       |                                                |
//! | POST   | /runs/{id}/relevance   | `verdict`: `relevant` or `irrelevant`          |
//! | GET    | /runs/{id}/state       |                                                |
//! | GET    | /runs/{id}/stream      | `?hz=4`                                        |
//! | GET    | /audit/export          | `?path=` to export a log file instead          |

mod error;

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tapid_core::audit::{parse_entered_time, verify_chain_bytes, AuditConfig, FileStore};
use tapid_core::config::load_profile;
use tapid_core::tap::{apply_tap, TapLossProfile};
use tapid_core::{
    open_source, CaptureSource, FrameStream, Registry, RunOrigin, RunStatus, Session, Verdict,
};

pub use error::ApiError;

pub const DEFAULT_STREAM_HZ: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Where audit logs go when a session does not name a file.
    pub audit_dir: PathBuf,
    pub stream_hz: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            audit_dir: PathBuf::from("."),
            stream_hz: DEFAULT_STREAM_HZ,
        }
    }
}

struct ActiveSession {
    id: String,
    session: Session,
    source: CaptureSource,
    profile: Option<TapLossProfile>,
    audit_path: Option<PathBuf>,
}

impl ActiveSession {
    fn open_stream(&self) -> Result<FrameStream, ApiError> {
        let stream = open_source(&self.source)?;
        Ok(match &self.profile {
            Some(p) => apply_tap(stream, p),
            None => stream,
        })
    }

    fn handle(&self) -> SessionHandle {
        let clock = self.session.audit().clock();
        SessionHandle {
            session_id: self.id.clone(),
            logging_enabled: self.session.audit().logging_enabled(),
            entered_time: clock
                .wall_anchor()
                .map(|t| t.format("%Y-%m-%d %H:%M").to_string()),
            elapsed_ns: clock.offset_ns(),
            active_run: self.session.active_run(),
            runs: self.session.run_ids(),
            audit_path: self.audit_path.as_ref().map(|p| p.display().to_string()),
            source: self.source.clone(),
        }
    }
}

/// Shared service state. Session mutations are serialized by the mutex.
/// Counter reads hold it only to copy the latest published snapshot and
/// never wait on a run thread.
pub struct AppState {
    registry: Arc<Registry>,
    config: ServiceConfig,
    session: Mutex<Option<ActiveSession>>,
    sessions_created: AtomicU64,
}

impl AppState {
    pub fn new(registry: Registry, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            registry: Arc::new(registry),
            config,
            session: Mutex::new(None),
            sessions_created: AtomicU64::new(0),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Option<ActiveSession>> {
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route(
            "/session",
            post(create_session).get(get_session).delete(end_session),
        )
        .route("/plugins", get(list_plugins))
        .route("/runs", post(start_run))
        .route("/runs/{id}/stop", post(stop_run))
        .route("/runs/{id}/rerun", post(rerun))
        .route("/runs/{id}/relevance", post(mark_relevance))
        .route("/runs/{id}/state", get(run_state))
        .route("/runs/{id}/stream", get(run_stream))
        .route("/audit/export", get(export_audit))
        .with_state(state)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let body: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn active(guard: &mut Option<ActiveSession>) -> Result<&mut ActiveSession, ApiError> {
    guard.as_mut().ok_or_else(ApiError::no_session)
}

#[derive(Debug, Serialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub logging_enabled: bool,
    pub entered_time: Option<String>,
    pub elapsed_ns: u64,
    pub active_run: Option<u64>,
    pub runs: Vec<u64>,
    pub audit_path: Option<String>,
    pub source: CaptureSource,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceSpec {
    replay: Option<PathBuf>,
    interface: Option<String>,
    snap_length: Option<u32>,
    #[serde(default)]
    realtime: bool,
}

impl SourceSpec {
    fn into_source(self) -> Result<CaptureSource, ApiError> {
        let source = match (self.replay, self.interface) {
            (Some(path), None) => CaptureSource::replay(path).with_realtime(self.realtime),
            (None, Some(iface)) => CaptureSource::live(iface),
            _ => {
                return Err(ApiError::bad_request(
                    "source needs exactly one of `replay` or `interface`",
                ))
            }
        };
        let source = match self.snap_length {
            Some(n) => source.with_snap_length(n),
            None => source,
        };
        source.validate()?;
        Ok(source)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    logging_enabled: bool,
    entered_now: Option<String>,
    source: SourceSpec,
    tap_profile: Option<PathBuf>,
    audit_path: Option<PathBuf>,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let mut guard = app.lock();
    if let Some(existing) = guard.as_ref() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "SessionAlreadyActive",
            format!("session {} is active", existing.id),
        ));
    }
    let entered = req
        .entered_now
        .as_deref()
        .map(parse_entered_time)
        .transpose()?;
    if req.logging_enabled && entered.is_none() {
        return Err(tapid_core::audit::AuditError::MissingTimeAnchor.into());
    }
    let source = req.source.into_source()?;
    let profile = req.tap_profile.as_deref().map(load_profile).transpose()?;
    // Fail now, not at the first run, if the source cannot be opened.
    drop(open_source(&source)?);

    let n = app.sessions_created.fetch_add(1, Ordering::Relaxed) + 1;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let id = format!("s{stamp:x}-{n}");
    let (audit, audit_path) = match entered {
        Some(entered) if req.logging_enabled => {
            let path = req
                .audit_path
                .unwrap_or_else(|| app.config.audit_dir.join(format!("audit-{id}.log")));
            let store = FileStore::create(&path).map_err(|e| {
                ApiError::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "StorageFailure",
                    format!("{}: {e}", path.display()),
                )
            })?;
            (AuditConfig::enabled(entered, Box::new(store)), Some(path))
        }
        _ => (AuditConfig::bypassed(), None),
    };
    let session = Session::begin(Arc::clone(&app.registry), audit)?;
    tracing::info!(session_id = %id, logging = req.logging_enabled, "session created");
    let active = guard.insert(ActiveSession {
        id,
        session,
        source,
        profile,
        audit_path,
    });
    Ok((StatusCode::CREATED, Json(active.handle())))
}

async fn get_session(State(app): State<Arc<AppState>>) -> Result<Json<SessionHandle>, ApiError> {
    let mut guard = app.lock();
    Ok(Json(active(&mut guard)?.handle()))
}

/// Ends the session, stopping any active run first so its stop is logged.
async fn end_session(State(app): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let mut guard = app.lock();
    let current = active(&mut guard)?;
    if let Some(run_id) = current.session.active_run() {
        current.session.stop_run(run_id)?;
    }
    let ended = guard.take().expect("checked above");
    let chain = verify_chain_bytes(&ended.session.audit().export());
    tracing::info!(session_id = %ended.id, "session ended");
    Ok(Json(
        json!({ "session_id": ended.id, "ended": true, "chain_status": chain.to_string() }),
    ))
}

async fn list_plugins(State(app): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(app.registry.enumerate()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartRun {
    plugin_id: String,
    #[serde(default)]
    params: BTreeMap<String, Value>,
    escalated_from: Option<u64>,
}

/// Parameters arrive as JSON scalars and are handed on as text for the
/// framework to validate.
fn params_as_text(params: BTreeMap<String, Value>) -> Result<BTreeMap<String, String>, ApiError> {
    params
        .into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            Value::Number(n) => Ok((k, n.to_string())),
            Value::Bool(b) => Ok((k, b.to_string())),
            other => Err(ApiError::bad_request(format!(
                "parameter {k:?} must be a scalar, got {other}"
            ))),
        })
        .collect()
}

async fn start_run(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let req: StartRun = parse_body(&body)?;
    let params = params_as_text(req.params)?;
    let mut guard = app.lock();
    let current = active(&mut guard)?;
    let origin = req
        .escalated_from
        .map_or(RunOrigin::Operator, RunOrigin::Escalation);
    // Checked before opening the source so a busy session reports that.
    if let Some(run) = current.session.active_run() {
        return Err(tapid_core::SessionError::RunStillActive(run).into());
    }
    let stream = current.open_stream()?;
    let state = current
        .session
        .start_run(&req.plugin_id, &params, stream, origin)?;
    Ok((StatusCode::CREATED, Json(state)))
}

async fn stop_run(
    State(app): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> Result<Json<Value>, ApiError> {
    let mut guard = app.lock();
    let current = active(&mut guard)?;
    let result = current.session.stop_run(id)?;
    let state = current.session.run_state(id)?;
    Ok(Json(json!({
        "run_id": id,
        "text": result.to_text(),
        "result": result,
        "stream_terminal": state.stream_terminal,
    })))
}

async fn rerun(
    State(app): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> Result<impl IntoResponse, ApiError> {
    let mut guard = app.lock();
    let current = active(&mut guard)?;
    let previous = current.session.run_state(id)?;
    if previous.status == RunStatus::Running {
        return Err(tapid_core::SessionError::RunStillActive(id).into());
    }
    let stream = current.open_stream()?;
    let state = current.session.rerun(id, stream)?;
    Ok((StatusCode::CREATED, Json(state)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarkRelevance {
    verdict: Verdict,
}

async fn mark_relevance(
    State(app): State<Arc<AppState>>,
    Path(id): Path<u64>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let req: MarkRelevance = parse_body(&body)?;
    let mut guard = app.lock();
    let current = active(&mut guard)?;
    let destruction = current.session.mark_relevance(id, req.verdict)?;
    Ok(Json(
        json!({ "run_id": id, "verdict": req.verdict, "destruction": destruction }),
    ))
}

async fn run_state(
    State(app): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> Result<Json<Value>, ApiError> {
    let mut guard = app.lock();
    let state = active(&mut guard)?.session.run_state(id)?;
    Ok(Json(json!(state)))
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    hz: Option<f64>,
}

struct StreamCursor {
    app: Arc<AppState>,
    run_id: u64,
    period: Duration,
    last_total: Option<u64>,
    first: bool,
    done: bool,
}

/// Pushes the run's state at a fixed cadence until the run stops; the last
/// event carries the final result. A snapshot whose total is lower than one
/// already sent is never emitted.
async fn run_stream(
    State(app): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Query(q): Query<StreamQuery>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    {
        let mut guard = app.lock();
        active(&mut guard)?.session.run_state(id)?;
    }
    let hz = q.hz.unwrap_or(app.config.stream_hz);
    if !(hz.is_finite() && hz > 0.0) {
        return Err(ApiError::bad_request(format!("invalid hz {hz}")));
    }
    let period = Duration::from_secs_f64(1.0 / hz.min(100.0));
    let cursor = StreamCursor {
        app,
        run_id: id,
        period,
        last_total: None,
        first: true,
        done: false,
    };
    let stream = futures::stream::unfold(cursor, |mut c| async move {
        loop {
            if c.done {
                return None;
            }
            if !c.first {
                tokio::time::sleep(c.period).await;
            }
            c.first = false;
            let state = {
                let guard = c.app.lock();
                guard
                    .as_ref()
                    .and_then(|s| s.session.run_state(c.run_id).ok())
            };
            let state = state?;
            c.done = state.status == RunStatus::Stopped;
            let total = state.live_counters.total_frames();
            if c.last_total.is_some_and(|last| total < last) {
                continue;
            }
            c.last_total = Some(total);
            let event = Event::default()
                .event("snapshot")
                .json_data(&state)
                .expect("run state serializes");
            return Some((Ok(event), c));
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    path: Option<PathBuf>,
}

/// The committed log verbatim, followed by one trailer line holding the
/// chain verification result.
async fn export_audit(
    State(app): State<Arc<AppState>>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    let path = match q.path {
        Some(p) => p,
        None => {
            let guard = app.lock();
            let current = guard.as_ref().ok_or_else(ApiError::no_session)?;
            match &current.audit_path {
                Some(p) => p.clone(),
                None => return Ok(export_response(current.session.audit().export())),
            }
        }
    };
    let bytes = std::fs::read(&path).map_err(|e| {
        tapid_core::audit::AuditError::UnreadableLog(format!("{}: {e}", path.display()))
    })?;
    Ok(export_response(bytes))
}

fn export_response(mut bytes: Vec<u8>) -> Response {
    let status = verify_chain_bytes(&bytes);
    if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        bytes.push(b'\n');
    }
    let trailer = json!({ "trailer": { "chain_status": status.to_string() } });
    bytes.extend_from_slice(trailer.to_string().as_bytes());
    bytes.push(b'\n');
    (
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        Body::from(bytes),
    )
        .into_response()
}
