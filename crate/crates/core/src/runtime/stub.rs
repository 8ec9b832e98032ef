//! A contract-conformant echo model. It serves the replica wire contract
//! without weights, which makes the whole hub testable without GPUs.
//!
//! Knobs (environment variables of the container):
//! `STUB_DELAY_MS` per-request delay, `STUB_FAIL_HEALTH` (`1`/`true`) makes
//! `/healthz` answer 503, `STUB_FAIL_RATE` in `[0, 1]` is the probability a
//! batch request answers 500.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use hyper_util::rt::TokioIo;
use hyper_util::service::TowerToHyperService;
use tokio::net::TcpListener;
use tokio::task::{JoinHandle, JoinSet};

use crate::digest::sha256_hex;
use crate::gateway::wire::{BatchRequest, BatchResponse, BatchResultItem, HEALTH_PATH, INFER_BATCH_PATH};

pub const ENV_MODEL_ID: &str = "MODELHUB_MODEL_ID";
pub const ENV_MODEL_VERSION: &str = "MODELHUB_MODEL_VERSION";
pub const ENV_DELAY_MS: &str = "STUB_DELAY_MS";
pub const ENV_FAIL_HEALTH: &str = "STUB_FAIL_HEALTH";
pub const ENV_FAIL_RATE: &str = "STUB_FAIL_RATE";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StubConfig {
    pub model_id: String,
    pub version: String,
    pub delay_ms: u64,
    pub fail_health: bool,
    pub fail_rate: f64,
}

impl StubConfig {
    pub fn from_env<'a>(vars: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut cfg = Self::default();
        for (k, v) in vars {
            match k {
                ENV_MODEL_ID => cfg.model_id = v.to_owned(),
                ENV_MODEL_VERSION => cfg.version = v.to_owned(),
                ENV_DELAY_MS => cfg.delay_ms = v.parse().unwrap_or(0),
                ENV_FAIL_HEALTH => cfg.fail_health = matches!(v, "1" | "true" | "yes"),
                ENV_FAIL_RATE => cfg.fail_rate = v.parse::<f64>().unwrap_or(0.0).clamp(0.0, 1.0),
                _ => {}
            }
        }
        cfg
    }
}

/// Output text for one prompt: the echo line, then the first 8 hex chars of
/// the SHA-256 of the image bytes the replica received.
pub fn echo_text(model_id: &str, version: &str, prompt: &str, image: &[u8]) -> String {
    format!(
        "ECHO[{model_id}@{version}]: {prompt}\nimage-sha256: {}",
        &sha256_hex(image)[..8]
    )
}

struct StubState {
    config: StubConfig,
    served: AtomicU64,
}

fn router(state: Arc<StubState>) -> Router {
    Router::new()
        .route(HEALTH_PATH, get(health))
        .route(INFER_BATCH_PATH, post(infer_batch))
        .with_state(state)
}

async fn health(State(state): State<Arc<StubState>>) -> StatusCode {
    if state.config.fail_health {
        StatusCode::SERVICE_UNAVAILABLE
    } else {
        StatusCode::OK
    }
}

async fn infer_batch(
    State(state): State<Arc<StubState>>,
    Json(req): Json<BatchRequest>,
) -> Result<Json<BatchResponse>, (StatusCode, String)> {
    let started = Instant::now();
    if state.config.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(state.config.delay_ms)).await;
    }
    if state.config.fail_rate > 0.0 && rand::random::<f64>() < state.config.fail_rate {
        return Err((StatusCode::INTERNAL_SERVER_ERROR, "stub failure".into()));
    }
    let mut items = Vec::with_capacity(req.items.len());
    for item in req.items {
        let image = base64::engine::general_purpose::STANDARD
            .decode(item.image_b64.as_bytes())
            .map_err(|e| (StatusCode::BAD_REQUEST, format!("image_b64: {e}")))?;
        items.push(BatchResultItem {
            text: echo_text(&state.config.model_id, &state.config.version, &item.prompt, &image),
            job_id: item.job_id,
            model_version: state.config.version.clone(),
            compute_ms: started.elapsed().as_millis() as u64,
        });
    }
    state.served.fetch_add(items.len() as u64, Ordering::Relaxed);
    Ok(Json(BatchResponse {
        batch_id: req.batch_id,
        items,
    }))
}

/// A running stub server. Dropping or killing it aborts every open
/// connection, so in-flight requests fail the way they would if the
/// container died.
pub struct StubServer {
    addr: SocketAddr,
    task: JoinHandle<()>,
    state: Arc<StubState>,
}

impl StubServer {
    pub async fn spawn(config: StubConfig, bind: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind).await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(StubState {
            config,
            served: AtomicU64::new(0),
        });
        let app = router(state.clone());
        let task = tokio::spawn(async move {
            let mut connections = JoinSet::new();
            loop {
                tokio::select! {
                    accepted = listener.accept() => {
                        let Ok((stream, _)) = accepted else { continue };
                        let service = TowerToHyperService::new(app.clone());
                        connections.spawn(async move {
                            let _ = hyper::server::conn::http1::Builder::new()
                                .serve_connection(TokioIo::new(stream), service)
                                .await;
                        });
                    }
                    Some(_) = connections.join_next(), if !connections.is_empty() => {}
                }
            }
        });
        Ok(Self { addr, task, state })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Items answered successfully so far.
    pub fn served(&self) -> u64 {
        self.state.served.load(Ordering::Relaxed)
    }

    pub fn kill(&self) {
        self.task.abort();
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}
