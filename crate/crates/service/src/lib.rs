//! HTTP service over a persistent [`TrendSystem`](trendnet_core::system::TrendSystem).

pub mod api;
pub mod persist;

use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use thiserror::Error;
use tower_http::services::ServeDir;
use trendnet_core::config::{ConfigError, SystemConfig};
use trendnet_core::system::Command;

pub use api::{router, AppState};
pub use persist::{Engine, EngineError, EventEnvelope};

pub const PORT_ENV: &str = "TRENDNET_PORT";

/// Wall-clock interval between free-run advances.
const FREE_RUN_STEP: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Config { path: String, source: ConfigError },
    #[error("{PORT_ENV}={0:?} is not a port number")]
    BadPort(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("binding {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads and validates a config file. Every violation is reported.
pub fn load_config(path: &Path) -> Result<SystemConfig, ServeError> {
    let text = std::fs::read_to_string(path).map_err(|source| ServeError::Read {
        path: path.display().to_string(),
        source,
    })?;
    SystemConfig::from_json(&text).map_err(|source| ServeError::Config {
        path: path.display().to_string(),
        source,
    })
}

/// The configured port unless overridden by the environment.
pub fn effective_port(cfg: &SystemConfig) -> Result<u16, ServeError> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| ServeError::BadPort(v)),
        Err(_) => Ok(cfg.server.port),
    }
}

/// Opens the data directory and serves until `shutdown` resolves. `on_bind`
/// receives the bound address, which matters when the port is 0.
pub async fn serve(
    cfg: SystemConfig,
    on_bind: impl FnOnce(SocketAddr),
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let port = effective_port(&cfg)?;
    let static_dir = cfg.server.static_dir.clone();
    let free_run = cfg.sim.free_run.then_some(cfg.sim.acceleration);
    let engine = tokio::task::spawn_blocking(move || Engine::open(cfg))
        .await
        .expect("engine open task")?;
    tracing::info!(dir = %engine.dir().display(), now_ms = engine.system().now_ms(), seq = engine.last_seq(), "data directory opened");
    let state = AppState::new(engine);
    let mut app = router(state.clone());
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    let bound = listener.local_addr()?;
    tracing::info!(%bound, "listening");
    on_bind(bound);
    let ticker = free_run.map(|accel| tokio::spawn(free_run_loop(state, accel)));
    let res = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    if let Some(t) = ticker {
        t.abort();
    }
    Ok(res?)
}

async fn free_run_loop(state: AppState, acceleration: f64) {
    let step_ms = (FREE_RUN_STEP.as_secs_f64() * 1000.0 * acceleration).round() as u64;
    if step_ms == 0 {
        return;
    }
    let mut tick = tokio::time::interval(FREE_RUN_STEP);
    tick.tick().await;
    loop {
        tick.tick().await;
        if let Err(e) = state.execute(Command::Advance { ms: step_ms }).await {
            tracing::error!(error = %e.message, "free-run advance failed");
        }
    }
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
