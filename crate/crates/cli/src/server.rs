//! HTTP control plane over an embedded engine.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, Method, StatusCode, Uri};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use pipewright::debugger::{BreakpointSpec, DebugConfig, FilterSpec, PauseReason};
use pipewright::discovery::{DiscoveryError, Ekg};
use pipewright::engine::{Engine, EngineError, Event, WorkflowSpec};
use pipewright::filter::parse_predicate;
use pipewright::host::{HostError, ModuleManifest};
use pipewright::lineage::{DatasetUri, LineageError};
use pipewright::metrics::MetricSelector;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::OnceCell;

use crate::home;

pub struct AppState {
    pub engine: Engine,
    pub ekg: RwLock<Option<Arc<Ekg>>>,
    requests: Mutex<HashMap<String, Arc<OnceCell<Reply>>>>,
}

impl AppState {
    pub fn new(engine: Engine, ekg: Option<Ekg>) -> Self {
        AppState {
            engine,
            ekg: RwLock::new(ekg.map(Arc::new)),
            requests: Mutex::new(HashMap::new()),
        }
    }
}

type Shared = Arc<AppState>;

/// A finished response, kept for request-id replays.
#[derive(Debug, Clone)]
pub struct Reply(StatusCode, Value);

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn ok(v: impl serde::Serialize) -> Reply {
    Reply(StatusCode::OK, serde_json::to_value(v).expect("response serializes"))
}

fn created(v: impl serde::Serialize) -> Reply {
    Reply(StatusCode::CREATED, serde_json::to_value(v).expect("response serializes"))
}

fn error(status: StatusCode, message: impl ToString) -> Reply {
    Reply(status, json!({ "error": message.to_string() }))
}

fn engine_error(e: EngineError) -> Reply {
    use StatusCode as S;
    let status = match &e {
        EngineError::Invalid(report) => {
            return Reply(S::BAD_REQUEST, json!({ "error": e.to_string(), "report": report }));
        }
        EngineError::UnknownRun(_)
        | EngineError::UnknownWorkflow(_)
        | EngineError::UnknownNode(_)
        | EngineError::UnknownEdge(_)
        | EngineError::UnknownBreakpoint(_) => S::NOT_FOUND,
        EngineError::NotMaterialized(_) | EngineError::WrongState { .. } | EngineError::NodeStarted(_) => S::CONFLICT,
        EngineError::Host(HostError::Conflict { .. }) => S::CONFLICT,
        EngineError::Lineage(LineageError::UnknownUri(_)) => S::NOT_FOUND,
        EngineError::Io(_) | EngineError::Lineage(LineageError::Io(_) | LineageError::BadJournal { .. }) => {
            S::INTERNAL_SERVER_ERROR
        }
        _ => S::BAD_REQUEST,
    };
    error(status, e)
}

fn anyhow_error(e: anyhow::Error) -> Reply {
    if let Some(HostError::Conflict { .. }) = e.downcast_ref::<HostError>() {
        return error(StatusCode::CONFLICT, format!("{e:#}"));
    }
    error(StatusCode::BAD_REQUEST, format!("{e:#}"))
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Reply> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

/// Runs blocking engine work off the async executor.
async fn blocking(f: impl FnOnce() -> Reply + Send + 'static) -> Reply {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e))
}

fn request_id(headers: &HeaderMap) -> Option<String> {
    ["idempotency-key", "x-request-id"]
        .iter()
        .find_map(|h| headers.get(*h))
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

/// Performs a mutating request once per client request id; retries with the
/// same id get the first reply back.
async fn once(
    st: &Shared,
    method: &Method,
    uri: &Uri,
    headers: &HeaderMap,
    f: impl FnOnce() -> Reply + Send + 'static,
) -> Reply {
    let Some(id) = request_id(headers) else {
        return blocking(f).await;
    };
    let key = format!("{method} {} {id}", uri.path());
    let cell = st.requests.lock().unwrap().entry(key).or_default().clone();
    cell.get_or_init(|| blocking(f)).await.clone()
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/modules", post(register_module).get(list_modules))
        .route("/api/workflows", post(submit_workflow))
        .route("/api/workflows/{id}/runs", post(start_run))
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/pause", post(pause_run))
        .route("/api/runs/{id}/resume", post(resume_run))
        .route("/api/runs/{id}/cancel", post(cancel_run))
        .route("/api/runs/{id}/filters", post(set_filter))
        .route("/api/runs/{id}/breakpoints", post(add_breakpoint))
        .route(
            "/api/runs/{id}/breakpoints/{bp}",
            delete(remove_breakpoint).patch(toggle_breakpoint),
        )
        .route("/api/runs/{id}/events", get(run_events))
        .route("/api/runs/{id}/edges/{edge}/rows", get(edge_rows))
        .route("/api/runs/{id}/metrics", get(run_metrics))
        .route("/api/metrics", get(query_metrics))
        .route("/api/lineage", get(lineage))
        .route("/api/lineage/replay", post(replay))
        .route("/api/discovery/joinable", get(joinable))
        .route("/api/discovery/search", get(search))
        .with_state(state)
}

pub async fn serve(state: Shared, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    use std::io::Write;
    std::io::stdout().flush()?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn register_module(State(st): State<Shared>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Reply {
    let s = st.clone();
    once(&st, &method, &uri, &headers, move || {
        let v: Value = match parse_body(&body) {
            Ok(v) => v,
            Err(r) => return r,
        };
        let res = match v.get("manifest_path").and_then(Value::as_str) {
            Some(p) => home::register_file(&s.engine, std::path::Path::new(p)),
            None => match serde_json::from_value::<ModuleManifest>(v) {
                Ok(m) => home::register_manifest(&s.engine, &m),
                Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed manifest: {e}")),
            },
        };
        match res {
            Ok(m) => created(&*m),
            Err(e) => anyhow_error(e),
        }
    })
    .await
}

async fn list_modules(State(st): State<Shared>) -> Reply {
    let list: Vec<ModuleManifest> = st.engine.registry().list().iter().map(|m| (**m).clone()).collect();
    ok(list)
}

async fn submit_workflow(State(st): State<Shared>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Reply {
    let s = st.clone();
    once(&st, &method, &uri, &headers, move || {
        let spec: WorkflowSpec = match parse_body(&body) {
            Ok(v) => v,
            Err(r) => return r,
        };
        match s.engine.submit_workflow(&spec) {
            Ok(id) => created(json!({ "workflow_id": id })),
            Err(e) => engine_error(e),
        }
    })
    .await
}

async fn start_run(
    State(st): State<Shared>,
    Path(id): Path<String>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Reply {
    let s = st.clone();
    once(&st, &method, &uri, &headers, move || {
        let debug: DebugConfig = if body.iter().all(u8::is_ascii_whitespace) {
            DebugConfig::default()
        } else {
            match parse_body(&body) {
                Ok(v) => v,
                Err(r) => return r,
            }
        };
        let res = s
            .engine
            .workflow(&id)
            .and_then(|spec| s.engine.create_run_for(&spec, &debug, Some(&id)))
            .and_then(|run| run.start());
        match res {
            Ok(snap) => created(snap),
            Err(e) => engine_error(e),
        }
    })
    .await
}

async fn list_runs(State(st): State<Shared>) -> Reply {
    ok(st.engine.list_runs())
}

async fn get_run(State(st): State<Shared>, Path(id): Path<String>) -> Reply {
    blocking(move || st.engine.snapshot(&id).map(ok).unwrap_or_else(engine_error)).await
}

macro_rules! control {
    ($name:ident, $status:expr, |$run:ident| $body:expr) => {
        async fn $name(
            State(st): State<Shared>,
            Path(id): Path<String>,
            method: Method,
            uri: Uri,
            headers: HeaderMap,
        ) -> Reply {
            let s = st.clone();
            once(&st, &method, &uri, &headers, move || {
                let res = s.engine.run(&id).and_then(|$run| $body);
                match res {
                    Ok(v) => Reply($status, serde_json::to_value(v).expect("snapshot serializes")),
                    Err(e) => engine_error(e),
                }
            })
            .await
        }
    };
}

control!(pause_run, StatusCode::ACCEPTED, |run| {
    run.request_pause(PauseReason::Manual).map(|_| run.snapshot())
});
control!(resume_run, StatusCode::OK, |run| run.resume());
control!(cancel_run, StatusCode::OK, |run| run.cancel());

async fn set_filter(
    State(st): State<Shared>,
    Path(id): Path<String>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Reply {
    let s = st.clone();
    once(&st, &method, &uri, &headers, move || {
        let spec: FilterSpec = match parse_body(&body) {
            Ok(v) => v,
            Err(r) => return r,
        };
        match s.engine.run(&id).and_then(|r| r.set_filter(&spec.target, spec.predicate.clone())) {
            Ok(rows) => created(json!({ "target": spec.target, "predicate": spec.predicate, "rows": rows })),
            Err(e) => engine_error(e),
        }
    })
    .await
}

async fn add_breakpoint(
    State(st): State<Shared>,
    Path(id): Path<String>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Reply {
    let s = st.clone();
    once(&st, &method, &uri, &headers, move || {
        let spec: BreakpointSpec = match parse_body(&body) {
            Ok(v) => v,
            Err(r) => return r,
        };
        s.engine
            .run(&id)
            .and_then(|r| r.set_breakpoint(spec))
            .map(created)
            .unwrap_or_else(engine_error)
    })
    .await
}

async fn remove_breakpoint(
    State(st): State<Shared>,
    Path((id, bp)): Path<(String, String)>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
) -> Reply {
    let s = st.clone();
    once(&st, &method, &uri, &headers, move || {
        s.engine
            .run(&id)
            .and_then(|r| r.remove_breakpoint(&bp))
            .map(ok)
            .unwrap_or_else(engine_error)
    })
    .await
}

#[derive(Deserialize)]
struct Toggle {
    enabled: bool,
}

async fn toggle_breakpoint(
    State(st): State<Shared>,
    Path((id, bp)): Path<(String, String)>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Reply {
    let s = st.clone();
    once(&st, &method, &uri, &headers, move || {
        let t: Toggle = match parse_body(&body) {
            Ok(v) => v,
            Err(r) => return r,
        };
        s.engine
            .run(&id)
            .and_then(|r| r.set_breakpoint_enabled(&bp, t.enabled))
            .map(ok)
            .unwrap_or_else(engine_error)
    })
    .await
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

fn sse_event(e: &Event) -> Result<SseEvent, Infallible> {
    Ok(SseEvent::default()
        .id(e.seq.to_string())
        .data(serde_json::to_string(e).expect("event serializes")))
}

async fn run_events(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, Reply> {
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(q.after)
        .unwrap_or(0);
    let live = st.engine.run(&id).ok();
    let stream = match live {
        Some(run) => stream::unfold((run, after), |(run, after)| async move {
            let r = run.clone();
            let batch = tokio::task::spawn_blocking(move || r.wait_events(after, Duration::from_secs(10)))
                .await
                .ok()?;
            if batch.is_empty() {
                if run.snapshot().status.is_terminal() && run.events_since(after).is_empty() {
                    return None;
                }
                return Some((Vec::new(), (run, after)));
            }
            let last = batch.last().map_or(after, |e| e.seq);
            Some((batch, (run, last)))
        })
        .boxed(),
        None => {
            // a run of an earlier session: replay its event log
            let snap = st.engine.snapshot(&id).map_err(engine_error)?;
            let text = std::fs::read_to_string(snap.run_dir.join("events.jsonl")).unwrap_or_default();
            let events: Vec<Event> = text
                .lines()
                .filter_map(|l| serde_json::from_str::<Event>(l).ok())
                .filter(|e| e.seq > after)
                .collect();
            stream::iter([events]).boxed()
        }
    };
    let stream = stream.flat_map(|batch| stream::iter(batch.iter().map(sse_event).collect::<Vec<_>>()));
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize)]
struct RowsQuery {
    offset: Option<usize>,
    limit: Option<usize>,
    filter: Option<String>,
}

async fn edge_rows(
    State(st): State<Shared>,
    Path((id, edge)): Path<(String, String)>,
    Query(q): Query<RowsQuery>,
) -> Reply {
    blocking(move || {
        let filter = match q.filter.as_deref().filter(|f| !f.trim().is_empty()).map(parse_predicate).transpose() {
            Ok(f) => f,
            Err(e) => return error(StatusCode::BAD_REQUEST, e),
        };
        st.engine
            .edge_rows(&id, &edge, q.offset.unwrap_or(0), q.limit.unwrap_or(100), filter.as_ref())
            .map(ok)
            .unwrap_or_else(engine_error)
    })
    .await
}

async fn run_metrics(State(st): State<Shared>, Path(id): Path<String>) -> Reply {
    if let Err(e) = st.engine.snapshot(&id) {
        return engine_error(e);
    }
    ok(st.engine.metrics().query(&MetricSelector {
        run: Some(id),
        ..Default::default()
    }))
}

async fn query_metrics(State(st): State<Shared>, Query(sel): Query<MetricSelector>) -> Reply {
    ok(st.engine.metrics().query(&sel))
}

#[derive(Deserialize)]
struct UriQuery {
    uri: String,
}

fn parse_uri(s: &str) -> Result<DatasetUri, Reply> {
    s.parse().map_err(|e: LineageError| error(StatusCode::BAD_REQUEST, e))
}

async fn lineage(State(st): State<Shared>, Query(q): Query<UriQuery>) -> Reply {
    let uri = match parse_uri(&q.uri) {
        Ok(u) => u,
        Err(r) => return r,
    };
    match st.engine.lineage().get_lineage(&uri) {
        Ok(g) => ok(g),
        Err(e) => engine_error(e.into()),
    }
}

async fn replay(State(st): State<Shared>, Query(q): Query<UriQuery>, method: Method, uri: Uri, headers: HeaderMap) -> Reply {
    let s = st.clone();
    once(&st, &method, &uri, &headers, move || {
        let uri = match parse_uri(&q.uri) {
            Ok(u) => u,
            Err(r) => return r,
        };
        s.engine.replay(&uri).map(ok).unwrap_or_else(engine_error)
    })
    .await
}

fn graph(st: &AppState) -> Result<Arc<Ekg>, Reply> {
    st.ekg.read().unwrap().clone().ok_or_else(|| {
        error(
            StatusCode::CONFLICT,
            "no discovery graph; start the server with --lake or run `discover build` first",
        )
    })
}

fn discovery_error(e: DiscoveryError) -> Reply {
    match e {
        DiscoveryError::UnknownColumn { .. } => error(StatusCode::NOT_FOUND, e),
        _ => error(StatusCode::BAD_REQUEST, e),
    }
}

#[derive(Deserialize)]
struct JoinQuery {
    table: String,
    column: String,
}

async fn joinable(State(st): State<Shared>, Query(q): Query<JoinQuery>) -> Reply {
    let g = match graph(&st) {
        Ok(g) => g,
        Err(r) => return r,
    };
    g.find_joinable(&q.table, &q.column).map(ok).unwrap_or_else(discovery_error)
}

#[derive(Deserialize)]
struct SearchQuery {
    q: String,
}

async fn search(State(st): State<Shared>, Query(q): Query<SearchQuery>) -> Reply {
    match graph(&st) {
        Ok(g) => ok(g.keyword_search(&q.q)),
        Err(r) => r,
    }
}
