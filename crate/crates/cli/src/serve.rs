//! HTTP session service. Utterances within one session are handled one at
//! a time; different sessions proceed concurrently. All sessions share the
//! gateway and the long-term store, so the long-term toggle applies to the
//! agents' namespaces service-wide.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::fs::File;
use std::future::Future;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use polyphony_core::gateway::AuditedGateway;
use polyphony_core::harness::{compute_metrics, ScenarioRun};
use polyphony_core::perception::{MultimodalInput, ScenePayload};
use polyphony_core::session::{AgentTurn, Session, TurnOutcome};
use serde::de::DeserializeOwned;
use tokio::sync::{broadcast, watch};
use tokio_stream::wrappers::BroadcastStream;

use crate::api::{
    AgentSummary, ApiError, CreateSession, Health, MemoryEntry, MemoryView, SessionInfo, StreamEvent, ToggleRequest, Toggles,
    TurnResponse, Utterance, API_VERSION,
};
use crate::roster::SessionFactory;
use crate::{Failure, ServeArgs};

pub const SESSION_LOG_FILE: &str = "session.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
const STREAM_CAPACITY: usize = 64;
const MAX_SESSION_ID: usize = 64;

struct LiveSession {
    session: Session,
    audit: Arc<AuditedGateway>,
    outcomes: Vec<TurnOutcome>,
    log: Option<BufWriter<File>>,
}

impl LiveSession {
    fn log(&mut self, event: &StreamEvent) {
        if let Some(w) = &mut self.log {
            let written = serde_json::to_writer(&mut *w, event).map_err(std::io::Error::from).and_then(|_| w.write_all(b"\n"));
            if let Err(e) = written {
                tracing::warn!("session log write failed: {e}");
            }
        }
    }

    fn toggles(&self) -> Toggles {
        let c = self.session.config();
        Toggles {
            v: API_VERSION,
            session_id: self.session.session_id().to_string(),
            coordination: c.coordination_enabled,
            longterm_memory: c.longterm_memory_enabled,
        }
    }
}

struct Slot {
    live: Mutex<LiveSession>,
    events: broadcast::Sender<StreamEvent>,
}

pub struct AppState {
    factory: SessionFactory,
    sessions: RwLock<BTreeMap<String, Arc<Slot>>>,
    log_dir: Option<PathBuf>,
    stop: watch::Sender<bool>,
}

impl AppState {
    pub fn new(factory: SessionFactory, log_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            factory,
            sessions: RwLock::new(BTreeMap::new()),
            log_dir,
            stop: watch::channel(false).0,
        })
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiFailure> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiFailure::not_found(format!("no session {id:?}")))
    }

    /// Ends every event stream and flushes each session's log, then writes
    /// its artifacts and request audit. Returns the number of sessions.
    pub fn flush_all(&self) -> std::io::Result<usize> {
        let _ = self.stop.send(true);
        let sessions = self.sessions.read().expect("session table poisoned");
        for (id, slot) in sessions.iter() {
            let mut live = slot.live.lock().unwrap_or_else(|p| p.into_inner());
            if let Some(w) = &mut live.log {
                w.flush()?;
            }
            if let Some(dir) = &self.log_dir {
                write_session_artifacts(&dir.join(id), &live)?;
            }
        }
        Ok(sessions.len())
    }
}

fn write_session_artifacts(dir: &Path, live: &LiveSession) -> std::io::Result<()> {
    let s = &live.session;
    let turns: Vec<AgentTurn> = live.outcomes.iter().flat_map(|o| o.turns.iter().cloned()).collect();
    let run = ScenarioRun {
        scenario_id: s.session_id().to_string(),
        timeline: s.timeline().clone(),
        transcript: s.transcript().to_vec(),
        decisions: s.decisions().to_vec(),
        outcomes: Vec::new(),
        probes: Vec::new(),
        metrics: compute_metrics(s.timeline().events(), s.transcript(), &[], s.decisions(), &turns),
    };
    run.write_artifacts(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(AUDIT_FILE))?);
    live.audit.write_jsonl(&mut w)?;
    w.flush()
}

/// Error envelope with an HTTP status.
#[derive(Debug)]
pub struct ApiFailure(StatusCode, ApiError);

impl ApiFailure {
    fn bad_request(m: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, ApiError::new("bad_request", m))
    }
    fn not_found(m: impl Into<String>) -> Self {
        Self(StatusCode::NOT_FOUND, ApiError::new("not_found", m))
    }
    fn internal(m: impl Into<String>) -> Self {
        Self(StatusCode::INTERNAL_SERVER_ERROR, ApiError::new("internal", m))
    }
}

impl From<Failure> for ApiFailure {
    fn from(f: Failure) -> Self {
        match f {
            Failure::Usage(m) => Self::bad_request(m),
            Failure::Runtime(m) => Self(StatusCode::BAD_GATEWAY, ApiError::new("runtime", m)),
        }
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

/// Bodies are parsed by hand so that malformed input still gets the error
/// envelope. An empty body reads as `{}`.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiFailure> {
    let body = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ApiFailure::bad_request(e.to_string()))
}

fn check_version(v: u32) -> Result<(), ApiFailure> {
    if v == API_VERSION {
        Ok(())
    } else {
        Err(ApiFailure(
            StatusCode::BAD_REQUEST,
            ApiError::new("unsupported_version", format!("v must be {API_VERSION}, got {v}")),
        ))
    }
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= MAX_SESSION_ID
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiFailure> + Send + 'static) -> Result<T, ApiFailure> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiFailure::internal(e.to_string()))?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        v: API_VERSION,
        status: "ok".into(),
        service: "polyphony".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        provider: state.factory.provider_label.clone(),
        sessions: state.sessions.read().expect("session table poisoned").len(),
        agents: state.factory.roster.profiles().iter().map(AgentSummary::from).collect(),
    })
}

fn info(live: &LiveSession) -> SessionInfo {
    let s = &live.session;
    let c = s.config();
    SessionInfo {
        v: API_VERSION,
        session_id: s.session_id().to_string(),
        agents: s.agents().iter().map(AgentSummary::from).collect(),
        threshold: c.threshold.get(),
        coordination: c.coordination_enabled,
        longterm_memory: c.longterm_memory_enabled,
        turns: live.outcomes.len(),
    }
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<SessionInfo>), ApiFailure> {
    let req: CreateSession = parse_body(&body)?;
    check_version(req.v)?;
    if let Some(id) = &req.session_id {
        if !valid_session_id(id) {
            return Err(ApiFailure::bad_request(format!(
                "session_id: use 1 to {MAX_SESSION_ID} of [A-Za-z0-9_.-], not starting with '.'"
            )));
        }
    }
    blocking(move || {
        let mut table = state.sessions.write().expect("session table poisoned");
        let id = match req.session_id {
            Some(id) if table.contains_key(&id) => {
                return Err(ApiFailure(StatusCode::CONFLICT, ApiError::new("conflict", format!("session {id:?} exists"))))
            }
            Some(id) => id,
            None => (table.len() + 1..).map(|n| format!("session-{n:04}")).find(|id| !table.contains_key(id)).expect("unbounded"),
        };
        let (session, audit) = state.factory.new_session(&id)?;
        let log = match &state.log_dir {
            Some(dir) => {
                let d = dir.join(&id);
                std::fs::create_dir_all(&d).map_err(|e| ApiFailure::internal(e.to_string()))?;
                Some(BufWriter::new(File::create(d.join(SESSION_LOG_FILE)).map_err(|e| ApiFailure::internal(e.to_string()))?))
            }
            None => None,
        };
        let live = LiveSession {
            session,
            audit,
            outcomes: Vec::new(),
            log,
        };
        let out = info(&live);
        table.insert(
            id,
            Arc::new(Slot {
                live: Mutex::new(live),
                events: broadcast::channel(STREAM_CAPACITY).0,
            }),
        );
        Ok((StatusCode::CREATED, Json(out)))
    })
    .await
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionInfo>, ApiFailure> {
    let slot = state.slot(&id)?;
    let live = slot.live.lock().map_err(|_| ApiFailure::internal("session poisoned"))?;
    Ok(Json(info(&live)))
}

async fn utterance(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<TurnResponse>, ApiFailure> {
    let req: Utterance = parse_body(&body)?;
    check_version(req.v)?;
    let scene = req.scene.filter(|s| !s.trim().is_empty());
    if req.text.trim().is_empty() && scene.is_none() {
        return Err(ApiFailure::bad_request("text: utterance has neither text nor scene"));
    }
    let mut input = MultimodalInput::utterance(&req.text);
    input.scene = scene.map(ScenePayload::Description);
    let slot = state.slot(&id)?;
    blocking(move || {
        let mut live = slot.live.lock().map_err(|_| ApiFailure::internal("session poisoned"))?;
        let outcome = live.session.handle(&input).map_err(|e| ApiFailure::from(Failure::from(e)))?;
        let resp = TurnResponse::from_outcome(&outcome);
        live.outcomes.push(outcome);
        let event = StreamEvent::Turn(resp.clone());
        live.log(&event);
        let _ = slot.events.send(event);
        Ok(Json(resp))
    })
    .await
}

async fn memory(
    State(state): State<Arc<AppState>>,
    UrlPath((id, agent_id)): UrlPath<(String, String)>,
) -> Result<Json<MemoryView>, ApiFailure> {
    let slot = state.slot(&id)?;
    blocking(move || {
        let live = slot.live.lock().map_err(|_| ApiFailure::internal("session poisoned"))?;
        let s = &live.session;
        if s.agent(&agent_id).is_none() {
            return Err(ApiFailure::not_found(format!("no agent {agent_id:?}")));
        }
        let records = s.memory_view(&agent_id).map_err(|e| ApiFailure::internal(e.to_string()))?;
        Ok(Json(MemoryView {
            v: API_VERSION,
            session_id: s.session_id().to_string(),
            agent_id: agent_id.clone(),
            longterm_memory: s.config().longterm_memory_enabled,
            last_query: s.last_retrieval(&agent_id).map(|r| r.query_text.clone()),
            records: records.into_iter().map(|(r, sim)| MemoryEntry::new(r, sim)).collect(),
        }))
    })
    .await
}

async fn toggles(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<Toggles>, ApiFailure> {
    let req: ToggleRequest = parse_body(&body)?;
    check_version(req.v)?;
    let slot = state.slot(&id)?;
    blocking(move || {
        let mut live = slot.live.lock().map_err(|_| ApiFailure::internal("session poisoned"))?;
        if let Some(c) = req.coordination {
            live.session.set_coordination(c);
        }
        if let Some(m) = req.longterm_memory {
            live.session.set_longterm_memory(m).map_err(|e| ApiFailure::internal(e.to_string()))?;
        }
        let t = live.toggles();
        let event = StreamEvent::Toggles(t.clone());
        live.log(&event);
        let _ = slot.events.send(event);
        Ok(Json(t))
    })
    .await
}

async fn events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiFailure> {
    let slot = state.slot(&id)?;
    let rx = slot.events.subscribe();
    let mut stop = state.stop.subscribe();
    let stream = BroadcastStream::new(rx)
        .filter_map(|m| async move {
            // A lagging subscriber skips what it missed.
            let e = m.ok()?;
            Event::default().event(e.name()).json_data(&e).ok().map(Ok)
        })
        .take_until(async move {
            let _ = stop.wait_for(|s| *s).await;
        });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session", post(create_session))
        .route("/session/:id", get(get_session))
        .route("/session/:id/utterance", post(utterance))
        .route("/session/:id/memory/:agent_id", get(memory))
        .route("/session/:id/toggles", post(toggles))
        .route("/session/:id/events", get(events))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then flushes every session.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<usize> {
    let stop = state.clone();
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async move {
            shutdown.await;
            // Event streams never end on their own.
            let _ = stop.stop.send(true);
        })
        .await?;
    state.flush_all()
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
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

pub fn serve(args: &ServeArgs) -> Result<(), Failure> {
    let factory = SessionFactory::from_args(&args.live)?;
    let state = AppState::new(factory, args.log_dir.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Failure::runtime(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr()?;
        println!("listening on http://{local}");
        std::io::stdout().flush()?;
        let n = serve_on(listener, state, shutdown_signal()).await?;
        eprintln!("shut down; flushed {n} session log(s)");
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_ids_are_path_safe() {
        assert!(valid_session_id("s-1.a_b"));
        for bad in ["", "..", ".hidden", "a/b", "a b", &"x".repeat(65)] {
            assert!(!valid_session_id(bad), "{bad:?}");
        }
    }

    #[test]
    fn empty_bodies_read_as_empty_objects() {
        let c: CreateSession = parse_body(b"").unwrap();
        assert_eq!(c.session_id, None);
        assert!(parse_body::<CreateSession>(b"{").is_err());
    }
}
