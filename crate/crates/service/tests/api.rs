use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use trendnet_core::config::SystemConfig;
use trendnet_service::{router, AppState, Engine};

fn quiet(dir: &Path) -> SystemConfig {
    let mut c = SystemConfig::default();
    c.traffic = c.traffic.without_noise();
    c.data_dir = dir.to_path_buf();
    c
}

fn app(cfg: SystemConfig) -> Router {
    router(AppState::new(Engine::open(cfg).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, "GET", uri, None).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(body)).await
}

/// 72 h of history, benchmarks, then a spike at 09:00 that confirms at noon.
async fn spike_scenario(app: &Router) -> Value {
    assert_eq!(post(app, "/api/v1/sim/advance", json!({"hours": 72})).await.0, StatusCode::OK);
    let (s, bms) = post(app, "/api/v1/benchmark/run", json!({"days": 3})).await;
    assert_eq!(s, StatusCode::OK, "{bms}");
    assert_eq!(bms.as_array().unwrap().len(), 4);
    post(app, "/api/v1/sim/advance", json!({"hours": 9})).await;
    let inject = json!({"inject": {"src_prefix": "10.0.1.0/24", "dst_prefix": "10.0.3.0/24", "factor": 3.0, "hours": 5}});
    let (s, v) = post(app, "/api/v1/sim/scenario", inject).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    post(app, "/api/v1/sim/advance", json!({"hours": 3})).await;
    let (_, ds) = get(app, "/api/v1/decisions").await;
    assert_eq!(ds.as_array().unwrap().len(), 1, "{ds}");
    ds[0].clone()
}

#[tokio::test]
async fn health_and_empty_series() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(quiet(dir.path()));
    assert_eq!(get(&app, "/api/v1/health").await, (StatusCode::OK, json!({"status": "ok"})));
    let (s, v) = get(&app, "/api/v1/series?host_ip=10.0.0.1&interface=FastEthernet0_0&src=collectd").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["points"], json!([]));
    assert_eq!(v["key"]["metric"], "outOctets");
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(quiet(dir.path()));
    for uri in [
        "/api/v1/series?interface=x",
        "/api/v1/series?host_ip=nope&interface=x&src=sdn",
        "/api/v1/series?host_ip=10.0.0.1&interface=x&src=carrier",
        "/api/v1/series?host_ip=10.0.0.1&interface=x&src=sdn&fn=median&bucket_ms=10",
        "/api/v1/series?host_ip=10.0.0.1&interface=x&src=sdn&from=5&to=1",
        "/api/v1/trends?active=maybe",
    ] {
        let (s, v) = get(&app, uri).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{uri}: {v}");
        assert!(v["error"].is_string());
    }
    assert_eq!(post(&app, "/api/v1/sim/advance", json!({"hours": -1})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, "/api/v1/sim/advance", json!({"days": 1})).await.0, StatusCode::BAD_REQUEST);
    let bad_prefix = json!({"inject": {"src_prefix": "10.9.9.0/24", "dst_prefix": "10.0.3.0/24", "factor": 3.0, "hours": 1}});
    assert_eq!(post(&app, "/api/v1/sim/scenario", bad_prefix).await.0, StatusCode::NOT_FOUND);
    let bad_factor = json!({"inject": {"src_prefix": "10.0.1.0/24", "dst_prefix": "10.0.3.0/24", "factor": -3.0, "hours": 1}});
    assert_eq!(post(&app, "/api/v1/sim/scenario", bad_factor).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn config_put_validates_and_applies() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(quiet(dir.path()));
    let (s, v) = call(
        &app,
        "PUT",
        "/api/v1/config",
        Some(json!({"analytics": {"threshold_fraction": 1.5, "confirm_window": 0}})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let keys: Vec<&str> = v["violations"].as_array().unwrap().iter().map(|x| x["key"].as_str().unwrap()).collect();
    assert!(keys.contains(&"analytics.threshold_fraction"), "{keys:?}");
    assert!(keys.contains(&"analytics.confirm_window"), "{keys:?}");

    let (s, _) = call(&app, "PUT", "/api/v1/config", Some(json!({"server": {"port": 1}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, v) = call(&app, "PUT", "/api/v1/config", Some(json!({"actioner": {"policy": "manual"}}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["actioner"]["policy"], "manual");
    assert_eq!(get(&app, "/api/v1/config").await.1["actioner"]["policy"], "manual");
}

#[tokio::test]
async fn benchmark_on_empty_store_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(quiet(dir.path()));
    let (s, v) = post(&app, "/api/v1/benchmark/run", json!({"days": 3})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("insufficient"), "{v}");
    let (s, _) = get(&app, "/api/v1/benchmark?host_ip=10.0.0.1&interface=FastEthernet0_0").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn benchmark_series_and_report_after_history() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(quiet(dir.path()));
    post(&app, "/api/v1/sim/advance", json!({"hours": 72})).await;
    let (_, bms) = post(&app, "/api/v1/benchmark/run", json!({})).await;
    let bm = &bms[0];
    let (host, iface) = (bm["link"]["host_ip"].as_str().unwrap(), bm["link"]["interface"].as_str().unwrap());
    let (s, one) = get(&app, &format!("/api/v1/benchmark?host_ip={host}&interface={iface}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&one, bm);
    assert_eq!(one["hours"].as_array().unwrap().len(), 24);

    let (_, raw) = get(&app, &format!("/api/v1/series?host_ip={host}&interface={iface}")).await;
    assert_eq!(raw["points"].as_array().unwrap().len(), 73);
    let (_, daily) = get(
        &app,
        &format!("/api/v1/series?host_ip={host}&interface={iface}&bucket_ms=86400000&fn=max"),
    )
    .await;
    assert_eq!(daily["points"].as_array().unwrap().len(), 4);

    let (s, report) = get(&app, "/api/v1/report").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(report["links"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn decision_lifecycle_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(quiet(dir.path()));
    let d = spike_scenario(&app).await;
    assert_eq!(d["status"], "applied");
    let id = d["id"].as_str().unwrap();
    assert_eq!(get(&app, &format!("/api/v1/decisions/{id}")).await.1, d);
    let (_, active) = get(&app, "/api/v1/trends?active=true").await;
    let active = active.as_array().unwrap();
    assert!(active.iter().any(|t| t["id"] == d["trend_event_id"]), "{active:?}");
    assert_eq!(get(&app, "/api/v1/trends?active=false").await.1, json!([]));

    assert_eq!(post(&app, &format!("/api/v1/decisions/{id}/approve"), json!({})).await.0, StatusCode::CONFLICT);
    let (s, v) = post(&app, &format!("/api/v1/decisions/{id}/revert"), json!({})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "reverted");
    assert_eq!(post(&app, &format!("/api/v1/decisions/{id}/revert"), json!({})).await.0, StatusCode::CONFLICT);
    assert_eq!(post(&app, "/api/v1/decisions/nope/revert", json!({})).await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/v1/decisions/nope").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn manual_policy_needs_approval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quiet(dir.path());
    cfg.actioner.policy = trendnet_core::actioner::Policy::Manual;
    let app = app(cfg);
    let d = spike_scenario(&app).await;
    assert_eq!(d["status"], "planned");
    let id = d["id"].as_str().unwrap();
    assert_eq!(post(&app, &format!("/api/v1/decisions/{id}/revert"), json!({})).await.0, StatusCode::CONFLICT);
    let (s, v) = post(&app, &format!("/api/v1/decisions/{id}/approve"), json!({})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["status"], "applied");
}

const READS: [&str; 9] = [
    "/api/v1/topology",
    "/api/v1/config",
    "/api/v1/benchmark",
    "/api/v1/trends",
    "/api/v1/decisions",
    "/api/v1/report",
    "/api/v1/sim/clock",
    "/api/v1/series?host_ip=10.0.0.1&interface=FastEthernet0_0",
    "/api/v1/series?host_ip=10.0.0.1&interface=FastEthernet0_0&bucket_ms=3600000&fn=mean",
];

async fn snapshot(app: &Router) -> Vec<(StatusCode, Value)> {
    let mut out = Vec::new();
    for uri in READS {
        out.push(get(app, uri).await);
    }
    out
}

#[tokio::test]
async fn restart_restores_every_read() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quiet(dir.path());
    let before = {
        let app = app(cfg.clone());
        spike_scenario(&app).await;
        snapshot(&app).await
    };
    let app = app(cfg);
    assert_eq!(snapshot(&app).await, before);
    for name in ["points.log", "trends.jsonl", "decisions.jsonl", "benchmarks.jsonl", "commands.jsonl"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(!text.is_empty(), "{name} is empty");
    }
}

#[test]
fn corrupt_trailing_command_is_truncated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quiet(dir.path());
    {
        let mut e = Engine::open(cfg.clone()).unwrap();
        e.execute(trendnet_core::system::Command::Advance { ms: 10 * 3_600_000 }).unwrap();
    }
    let path = dir.path().join("commands.jsonl");
    let good = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, format!("{good}{{\"op\":\"adv")).unwrap();
    let e = Engine::open(cfg).unwrap();
    assert_eq!(e.system().now_ms(), e.system().config().sim.epoch_ms + 10 * 3_600_000);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), good);
}

#[test]
fn corrupt_middle_command_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quiet(dir.path());
    Engine::open(cfg.clone()).unwrap();
    let path = dir.path().join("commands.jsonl");
    std::fs::write(&path, "garbage\n{\"op\":\"advance\",\"ms\":1}\n").unwrap();
    let err = Engine::open(cfg).unwrap_err().to_string();
    assert!(err.contains("commands.jsonl") && err.contains("line 1"), "{err}");
}

#[test]
fn structural_config_change_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quiet(dir.path());
    Engine::open(cfg.clone()).unwrap();
    let mut other = cfg.clone();
    other.traffic = SystemConfig::default().traffic;
    let err = Engine::open(other).unwrap_err().to_string();
    assert!(err.contains("config.json"), "{err}");
    let mut runtime = cfg;
    runtime.analytics.confirm_window = 4;
    let e = Engine::open(runtime).unwrap();
    assert_eq!(e.system().config().analytics.confirm_window, 4);
}

#[test]
fn fresh_directory_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let e = Engine::open(quiet(&dir.path().join("new"))).unwrap();
    assert_eq!(e.last_seq(), 0);
    assert!(e.system().decisions().is_empty());
}

/// Reads SSE frames until `n` events arrive, returning (id, event, data).
async fn read_events(app: &Router, uri: &str, last_id: Option<u64>, n: usize) -> Vec<(u64, String, Value)> {
    let mut req = Request::builder().uri(uri);
    if let Some(id) = last_id {
        req = req.header("last-event-id", id.to_string());
    }
    let resp = app.clone().oneshot(req.body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let mut body = resp.into_body();
    let mut buf = String::new();
    let mut out = Vec::new();
    while out.len() < n {
        let frame = tokio::time::timeout(Duration::from_secs(10), body.frame())
            .await
            .expect("sse frame in time")
            .expect("stream open")
            .unwrap();
        if let Ok(data) = frame.into_data() {
            buf.push_str(std::str::from_utf8(&data).unwrap());
        }
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let (mut id, mut ev, mut data) = (None, String::new(), String::new());
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("id: ").or(line.strip_prefix("id:")) {
                    id = v.trim().parse().ok();
                } else if let Some(v) = line.strip_prefix("event: ").or(line.strip_prefix("event:")) {
                    ev = v.trim().to_string();
                } else if let Some(v) = line.strip_prefix("data: ").or(line.strip_prefix("data:")) {
                    data.push_str(v);
                }
            }
            if let Some(id) = id {
                out.push((id, ev, serde_json::from_str(&data).unwrap()));
            }
        }
    }
    out
}

#[tokio::test]
async fn events_stream_in_order_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quiet(dir.path());
    let state = AppState::new(Engine::open(cfg).unwrap());
    let app = router(state);
    post(&app, "/api/v1/sim/advance", json!({"hours": 72})).await;
    post(&app, "/api/v1/benchmark/run", json!({})).await;
    let (_, clock) = get(&app, "/api/v1/sim/clock").await;
    let last = clock["last_seq"].as_u64().unwrap();
    assert!(last >= 4);

    let replay = read_events(&app, "/api/v1/events?since=0", None, last as usize).await;
    let seqs: Vec<u64> = replay.iter().map(|e| e.0).collect();
    assert_eq!(seqs, (1..=last).collect::<Vec<_>>());
    assert_eq!(replay.last().unwrap().1, "benchmark");
    assert_eq!(replay[0].2["kind"], "sample");
    assert_eq!(replay[0].2["seq"], 1);

    let resumed = read_events(&app, "/events", Some(last - 2), 2).await;
    assert_eq!(resumed.iter().map(|e| e.0).collect::<Vec<_>>(), [last - 1, last]);

    // live: subscribe, then produce more
    let live = {
        let app = app.clone();
        tokio::spawn(async move { read_events(&app, &format!("/api/v1/events?since={last}"), None, 4).await })
    };
    tokio::time::sleep(Duration::from_millis(100)).await;
    post(&app, "/api/v1/sim/advance", json!({"hours": 1})).await;
    let live = live.await.unwrap();
    assert_eq!(live.iter().map(|e| e.0).collect::<Vec<_>>(), (last + 1..=last + 4).collect::<Vec<_>>());
    assert!(live.iter().all(|e| e.1 == "sample"));
}

#[test]
fn second_writer_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quiet(dir.path());
    let first = Engine::open(cfg.clone()).unwrap();
    let err = Engine::open(cfg.clone()).unwrap_err().to_string();
    assert!(err.contains("in use"), "{err}");
    Engine::open_read_only(dir.path()).unwrap();
    drop(first);
    Engine::open(cfg).unwrap();
}

#[test]
fn load_config_reports_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, "").unwrap();
    assert_eq!(trendnet_service::load_config(&path).unwrap(), SystemConfig::default());
    std::fs::write(&path, r#"{"analytics": {"threshold_fraction": 1.5}}"#).unwrap();
    let err = trendnet_service::load_config(&path).unwrap_err().to_string();
    assert!(err.contains("analytics.threshold_fraction"), "{err}");
    std::fs::write(&path, r#"{"analytics": {"threshold_fraction": 1.5, "deviation_multiplier": -1}}"#).unwrap();
    let err = trendnet_service::load_config(&path).unwrap_err().to_string();
    assert!(err.contains("threshold_fraction") && err.contains("deviation_multiplier"), "{err}");
    std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
    assert!(trendnet_service::load_config(&path).is_err());
    assert!(trendnet_service::load_config(&dir.path().join("missing.json")).is_err());
}
