use std::collections::VecDeque;
use std::convert::Infallible;
use std::net::Ipv4Addr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;
use trendnet_core::actioner::ActionError;
use trendnet_core::analytics::{AnalyticsError, LinkId, TrendEvent};
use trendnet_core::collector::Source;
use trendnet_core::config::{ConfigError, Violation};
use trendnet_core::netsim::SimError;
use trendnet_core::pipeline::Metric;
use trendnet_core::system::{Command, EventBody, SystemError};
use trendnet_core::tsdb::{aggregate, AggFn, SeriesKey, StoreError};

use crate::persist::{Engine, EngineError, EventEnvelope};

const HOUR_MS: f64 = 3_600_000.0;

/// Shared handle: the engine behind a lock plus a watermark of the last
/// published event sequence.
#[derive(Clone)]
pub struct AppState {
    engine: Arc<Mutex<Engine>>,
    seq: Arc<watch::Sender<u64>>,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        let (tx, _) = watch::channel(engine.last_seq());
        AppState {
            engine: Arc::new(Mutex::new(engine)),
            seq: Arc::new(tx),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Engine> {
        self.engine.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs a command on a blocking thread, journaling it before returning.
    pub async fn execute(&self, cmd: Command) -> Result<Vec<EventEnvelope>, ApiError> {
        let st = self.clone();
        tokio::task::spawn_blocking(move || {
            let mut engine = st.lock();
            let res = engine.execute(cmd);
            st.seq.send_replace(engine.last_seq());
            res
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
    }

    pub fn into_engine(self) -> Option<Engine> {
        Arc::into_inner(self.engine).map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()))
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violations: Vec<Violation>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub violations: Vec<Violation>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            violations: Vec::new(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            violations: self.violations,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        let mut err = ApiError::bad_request(e.to_string());
        if let ConfigError::Validation(v) = e {
            err.violations = v;
        }
        err
    }
}

fn sim_status(e: &SimError) -> StatusCode {
    match e {
        SimError::UnknownPrefix(_) | SimError::UnknownDemand { .. } => StatusCode::NOT_FOUND,
        SimError::InvalidFactor | SimError::ZeroInterval | SimError::BadProfile(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<SystemError> for ApiError {
    fn from(e: SystemError) -> Self {
        let status = match &e {
            SystemError::Config(c) => return c.clone().into(),
            SystemError::Invalid(_) => StatusCode::BAD_REQUEST,
            SystemError::Sim(s) => sim_status(s),
            SystemError::Benchmark { .. }
            | SystemError::Analytics(AnalyticsError::InsufficientData { .. }) => StatusCode::CONFLICT,
            SystemError::Action(a) => match a {
                ActionError::UnknownDecision(_) => StatusCode::NOT_FOUND,
                ActionError::InvalidTransition { .. }
                | ActionError::NoAlternatePath { .. }
                | ActionError::NoAffectedPrefix { .. } => StatusCode::CONFLICT,
                ActionError::Control(s) => sim_status(s),
            },
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::System(s) => s.into(),
            EngineError::Config(c) => c.into(),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Unavailable(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
            _ => ApiError::bad_request(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Parses a JSON body, turning rejections into the common error shape.
fn body<T: for<'de> Deserialize<'de>>(raw: &[u8]) -> Result<T, ApiError> {
    let raw: &[u8] = if raw.iter().all(u8::is_ascii_whitespace) { b"{}" } else { raw };
    serde_json::from_slice(raw).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

fn query<T: for<'de> Deserialize<'de>>(q: Result<Query<T>, axum::extract::rejection::QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(t)| t)
        .map_err(|e| ApiError::bad_request(format!("malformed query: {}", e.body_text())))
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/topology", get(topology))
        .route("/config", get(get_config).put(put_config))
        .route("/series", get(series))
        .route("/benchmark/run", post(run_benchmark))
        .route("/benchmark", get(get_benchmark))
        .route("/trends", get(trends))
        .route("/decisions", get(decisions))
        .route("/decisions/{id}", get(decision))
        .route("/decisions/{id}/approve", post(approve))
        .route("/decisions/{id}/revert", post(revert))
        .route("/sim/scenario", post(scenario))
        .route("/sim/advance", post(advance))
        .route("/sim/clock", get(clock))
        .route("/report", get(report))
        .route("/events", get(events));
    Router::new()
        .nest("/api/v1", api)
        .route("/events", get(events))
        .with_state(state)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn topology(State(st): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(st.lock().system().topology_view()).expect("serializes"))
}

async fn get_config(State(st): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(st.lock().system().config()).expect("serializes"))
}

async fn put_config(State(st): State<AppState>, raw: axum::body::Bytes) -> ApiResult<Value> {
    let patch: Value = body(&raw)?;
    let next = st.lock().system().config().patched(&patch)?;
    st.execute(Command::Configure {
        analytics: next.analytics,
        actioner: next.actioner,
    })
    .await?;
    Ok(Json(serde_json::to_value(st.lock().system().config()).expect("serializes")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeriesQuery {
    metric: Option<String>,
    host_ip: Ipv4Addr,
    interface: String,
    src: Option<String>,
    from: Option<u64>,
    to: Option<u64>,
    bucket_ms: Option<u64>,
    #[serde(rename = "fn")]
    agg: Option<String>,
}

#[derive(Debug, Serialize)]
struct SeriesResponse {
    key: SeriesKey,
    points: Vec<trendnet_core::tsdb::DataPoint>,
}

async fn series(
    State(st): State<AppState>,
    q: Result<Query<SeriesQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<SeriesResponse> {
    let q = query(q)?;
    let metric: Metric = match &q.metric {
        Some(m) => m.parse().map_err(|_| ApiError::bad_request(format!("unknown metric {m}")))?,
        None => Metric::OutOctets,
    };
    let engine = st.lock();
    let sys = engine.system();
    let src: Source = match &q.src {
        Some(s) => s.parse().map_err(|_| ApiError::bad_request(format!("unknown src {s}")))?,
        None => match sys.link(q.host_ip, &q.interface) {
            Some(l) => l.src,
            None => return Err(ApiError::bad_request("src is required for unmonitored interfaces")),
        },
    };
    let key = SeriesKey::new(metric, q.host_ip, q.interface, src);
    let points = sys.store().query(&key, q.from.unwrap_or(0), q.to.unwrap_or(u64::MAX))?;
    let points = match (q.bucket_ms, &q.agg) {
        (None, None) => points,
        (bucket, agg) => {
            let f: AggFn = match agg {
                Some(a) => a.parse().map_err(|_| ApiError::bad_request(format!("unknown fn {a}")))?,
                None => AggFn::Mean,
            };
            let bucket = bucket.ok_or_else(|| ApiError::bad_request("fn requires bucket_ms"))?;
            aggregate(&points, bucket, f)?
        }
    };
    Ok(Json(SeriesResponse { key, points }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunBenchmark {
    days: Option<u32>,
}

async fn run_benchmark(State(st): State<AppState>, raw: axum::body::Bytes) -> ApiResult<Vec<Value>> {
    let req: RunBenchmark = body(&raw)?;
    let events = st.execute(Command::BuildBenchmarks { days: req.days }).await?;
    Ok(Json(
        events
            .into_iter()
            .filter_map(|e| match e.event.body {
                EventBody::Benchmark(b) => Some(serde_json::to_value(b).expect("serializes")),
                _ => None,
            })
            .collect(),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkQuery {
    host_ip: Option<Ipv4Addr>,
    interface: Option<String>,
}

async fn get_benchmark(
    State(st): State<AppState>,
    q: Result<Query<LinkQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let q = query(q)?;
    let engine = st.lock();
    let sys = engine.system();
    let v = match (q.host_ip, q.interface) {
        (Some(host_ip), Some(interface)) => {
            let link = LinkId { host_ip, interface };
            let bm = sys
                .benchmark(&link)
                .ok_or_else(|| ApiError::not_found(format!("no benchmark for {link}")))?;
            serde_json::to_value(bm)
        }
        (None, None) => serde_json::to_value(sys.benchmarks().collect::<Vec<_>>()),
        _ => return Err(ApiError::bad_request("host_ip and interface go together")),
    };
    Ok(Json(v.expect("serializes")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrendQuery {
    active: Option<bool>,
}

async fn trends(
    State(st): State<AppState>,
    q: Result<Query<TrendQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Vec<TrendEvent>> {
    let q = query(q)?;
    let engine = st.lock();
    let list = engine
        .system()
        .trends()
        .iter()
        .filter(|t| q.active.is_none_or(|a| a == t.ended_at_ms.is_none()))
        .cloned()
        .collect();
    Ok(Json(list))
}

async fn decisions(State(st): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(st.lock().system().decisions()).expect("serializes"))
}

async fn decision(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    let engine = st.lock();
    let d = engine
        .system()
        .decision(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown decision {id}")))?;
    Ok(Json(serde_json::to_value(d).expect("serializes")))
}

async fn decision_command(st: AppState, cmd: Command) -> ApiResult<Value> {
    let events = st.execute(cmd).await?;
    let d = events
        .into_iter()
        .rev()
        .find_map(|e| match e.event.body {
            EventBody::Decision(d) => Some(d),
            _ => None,
        })
        .ok_or_else(|| ApiError::internal("decision command produced no decision"))?;
    Ok(Json(serde_json::to_value(d).expect("serializes")))
}

async fn approve(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    decision_command(st, Command::Approve { id }).await
}

async fn revert(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Value> {
    decision_command(st, Command::Revert { id }).await
}

fn hours_to_ms(hours: f64) -> Result<u64, ApiError> {
    if !hours.is_finite() || hours <= 0.0 {
        return Err(ApiError::bad_request("hours must be a positive number"));
    }
    Ok((hours * HOUR_MS).round() as u64)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InjectSpec {
    src_prefix: ipnet::Ipv4Net,
    dst_prefix: ipnet::Ipv4Net,
    factor: f64,
    hours: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Scenario {
    inject: InjectSpec,
}

async fn scenario(State(st): State<AppState>, raw: axum::body::Bytes) -> ApiResult<Value> {
    let Scenario { inject } = body(&raw)?;
    let duration_ms = hours_to_ms(inject.hours)?;
    st.execute(Command::Inject {
        src_prefix: inject.src_prefix,
        dst_prefix: inject.dst_prefix,
        factor: inject.factor,
        duration_ms,
    })
    .await?;
    let engine = st.lock();
    let sys = engine.system();
    Ok(Json(json!({ "now_ms": sys.now_ms(), "injections": sys.net().injections() })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Advance {
    hours: f64,
}

async fn advance(State(st): State<AppState>, raw: axum::body::Bytes) -> ApiResult<Value> {
    let req: Advance = body(&raw)?;
    let ms = hours_to_ms(req.hours)?;
    let events = st.execute(Command::Advance { ms }).await?;
    let engine = st.lock();
    Ok(Json(json!({
        "now_ms": engine.system().now_ms(),
        "events": events.len(),
        "last_seq": engine.last_seq(),
    })))
}

async fn clock(State(st): State<AppState>) -> Json<Value> {
    let engine = st.lock();
    Json(json!({ "now_ms": engine.system().now_ms(), "last_seq": engine.last_seq() }))
}

async fn report(State(st): State<AppState>) -> ApiResult<Value> {
    let engine = st.lock();
    let doc = engine
        .system()
        .report()
        .ok_or_else(|| ApiError::not_found("no benchmarks yet"))?;
    Ok(Json(serde_json::to_value(doc).expect("serializes")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventsQuery {
    since: Option<u64>,
}

struct Cursor {
    state: AppState,
    rx: watch::Receiver<u64>,
    after: u64,
    pending: VecDeque<EventEnvelope>,
}

fn sse_event(env: &EventEnvelope) -> Event {
    Event::default()
        .id(env.seq.to_string())
        .event(env.kind())
        .json_data(env)
        .expect("envelope serializes")
}

/// Streams envelopes with seq greater than the cursor, in order. Each client
/// reads the shared log at its own pace, so none are dropped.
fn event_stream(cursor: Cursor) -> impl Stream<Item = Result<Event, Infallible>> {
    futures::stream::unfold(cursor, |mut c| async move {
        loop {
            if let Some(env) = c.pending.pop_front() {
                c.after = env.seq;
                return Some((Ok(sse_event(&env)), c));
            }
            c.rx.borrow_and_update();
            c.pending.extend(c.state.lock().events_after(c.after).iter().take(512).cloned());
            if c.pending.is_empty() && c.rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

async fn events(
    State(st): State<AppState>,
    headers: HeaderMap,
    q: Result<Query<EventsQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let q = query(q)?;
    let last_id = match headers.get("last-event-id") {
        Some(v) => Some(
            v.to_str()
                .ok()
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| ApiError::bad_request("Last-Event-ID must be an integer"))?,
        ),
        None => None,
    };
    let rx = st.seq.subscribe();
    let after = last_id.or(q.since).unwrap_or_else(|| st.lock().last_seq());
    let cursor = Cursor {
        state: st,
        rx,
        after,
        pending: VecDeque::new(),
    };
    Ok(Sse::new(event_stream(cursor)).keep_alive(KeepAlive::default()))
}
