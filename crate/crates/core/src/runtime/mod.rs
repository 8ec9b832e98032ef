//! Container runtime adapter: turns sealed weight bundles into images,
//! starts isolated replicas, health-checks them, and drains or kills them.
//!
//! Each replica is one container. The gateway routes through
//! [`Replica::try_acquire`], which refuses anything not `Healthy`; that is
//! what lets a drain wait for in-flight work without admitting new jobs.

pub mod docker;
pub mod engine;
pub mod mock;
pub mod stub;

use std::collections::{BTreeMap, HashMap};
use std::pin::pin;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::acquisition::WeightBundle;
use crate::gateway::wire::HEALTH_PATH;
use crate::net::HttpClient;
use crate::time::{now_ms, now_utc};

pub use engine::{ContainerRuntime, ContainerStats, CreateRequest, EngineError, ImageSpec, SECRET_NETWORK};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplicaState {
    Starting,
    Healthy,
    Draining,
    Stopped,
    Dead(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaHandle {
    pub replica_id: String,
    pub container_id: String,
    pub model_id: String,
    pub version: String,
    pub endpoint: String,
    pub state: ReplicaState,
    #[serde(with = "chrono::serde::ts_milliseconds")]
    pub started_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuntimeEventKind {
    Created,
    HealthPass,
    HealthFail,
    Drained,
    Stopped,
    Died,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeEvent {
    pub ts_ms: i64,
    pub replica_id: String,
    pub kind: RuntimeEventKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HealthStatus {
    Pass,
    Fail(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopMode {
    Drain,
    Kill,
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("container runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("image build failed: {0}")]
    BuildFailed(String),
    #[error("bundle for {model_id}@{version} is not sealed")]
    BundleNotSealed { model_id: String, version: String },
    #[error("replica {replica_id} did not become healthy in time: {reason}")]
    StartupTimeout { replica_id: String, reason: String },
    #[error("unknown replica {0}")]
    UnknownReplica(String),
    #[error("container engine: {0}")]
    Engine(String),
}

impl From<EngineError> for RuntimeError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Unavailable(m) => Self::RuntimeUnavailable(m),
            EngineError::BuildFailed(m) => Self::BuildFailed(m),
            other => Self::Engine(other.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub health_interval: Duration,
    pub health_timeout: Duration,
    /// Consecutive failed probes before a replica is declared dead.
    pub dead_after: u32,
    pub startup_timeout: Duration,
    pub startup_poll: Duration,
    pub drain_timeout: Duration,
    /// Base image per runtime profile; unknown profiles use
    /// `modelhub/{profile}-base:latest`.
    pub base_images: BTreeMap<String, String>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            health_interval: Duration::from_secs(5),
            health_timeout: Duration::from_secs(2),
            dead_after: 3,
            startup_timeout: Duration::from_secs(30),
            startup_poll: Duration::from_millis(50),
            drain_timeout: Duration::from_secs(30),
            base_images: BTreeMap::from([("stub".to_owned(), "modelhub/stub-base:latest".to_owned())]),
        }
    }
}

/// A live replica plus its in-flight accounting.
#[derive(Debug)]
pub struct Replica {
    handle: Mutex<ReplicaHandle>,
    in_flight: AtomicUsize,
    idle: Notify,
    failures: AtomicU32,
    lifecycle: tokio::sync::Mutex<()>,
}

/// Marks one batch in flight on a replica until dropped.
#[derive(Debug)]
pub struct InFlight(Arc<Replica>);

impl InFlight {
    pub fn replica(&self) -> &Arc<Replica> {
        &self.0
    }
}

impl Drop for InFlight {
    fn drop(&mut self) {
        if self.0.in_flight.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.0.idle.notify_waiters();
        }
    }
}

impl Replica {
    fn new(handle: ReplicaHandle) -> Self {
        Self {
            handle: Mutex::new(handle),
            in_flight: AtomicUsize::new(0),
            idle: Notify::new(),
            failures: AtomicU32::new(0),
            lifecycle: tokio::sync::Mutex::new(()),
        }
    }

    pub fn handle(&self) -> ReplicaHandle {
        self.handle.lock().clone()
    }

    pub fn id(&self) -> String {
        self.handle.lock().replica_id.clone()
    }

    pub fn state(&self) -> ReplicaState {
        self.handle.lock().state.clone()
    }

    pub fn endpoint(&self) -> String {
        self.handle.lock().endpoint.clone()
    }

    pub fn is_healthy(&self) -> bool {
        self.handle.lock().state == ReplicaState::Healthy
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::Acquire)
    }

    /// Admits one unit of work if the replica is healthy.
    pub fn try_acquire(self: &Arc<Self>) -> Option<InFlight> {
        let handle = self.handle.lock();
        if handle.state != ReplicaState::Healthy {
            return None;
        }
        self.in_flight.fetch_add(1, Ordering::AcqRel);
        Some(InFlight(self.clone()))
    }

    fn set_state(&self, state: ReplicaState) {
        self.handle.lock().state = state;
    }

    /// Waits until nothing is in flight or the timeout passes. Returns
    /// whether the replica went idle.
    async fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let mut notified = pin!(self.idle.notified());
            notified.as_mut().enable();
            if self.in_flight() == 0 {
                return true;
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return self.in_flight() == 0;
            }
        }
    }
}

/// Result of containerizing a bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBuild {
    pub image_ref: String,
    pub weights_digest: String,
}

pub struct RuntimeManager {
    engine: Arc<dyn ContainerRuntime>,
    http: HttpClient,
    config: RuntimeConfig,
    replicas: RwLock<BTreeMap<String, Arc<Replica>>>,
    events: Mutex<Vec<RuntimeEvent>>,
    env_overrides: Mutex<HashMap<(String, String), Vec<(String, String)>>>,
    counter: AtomicU64,
}

impl std::fmt::Debug for RuntimeManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RuntimeManager")
            .field("replicas", &self.replicas.read().len())
            .finish()
    }
}

fn container_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-') { c } else { '_' })
        .collect()
}

impl RuntimeManager {
    pub fn new(engine: Arc<dyn ContainerRuntime>, http: HttpClient, config: RuntimeConfig) -> Self {
        Self {
            engine,
            http,
            config,
            replicas: RwLock::new(BTreeMap::new()),
            events: Mutex::new(Vec::new()),
            env_overrides: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        }
    }

    pub fn engine(&self) -> &Arc<dyn ContainerRuntime> {
        &self.engine
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    /// Extra container environment for every future replica of a model
    /// version; this is how stub knobs are set.
    pub fn set_replica_env(&self, model_id: &str, version: &str, key: &str, value: &str) {
        let mut map = self.env_overrides.lock();
        let vars = map.entry((model_id.to_owned(), version.to_owned())).or_default();
        vars.retain(|(k, _)| k != key);
        vars.push((key.to_owned(), value.to_owned()));
    }

    pub fn image_ref_for(profile: &str, weights_digest: &str) -> String {
        format!("modelhub/{profile}:{}", &weights_digest[..8])
    }

    /// Builds the image serving a sealed bundle. The weights are not copied
    /// into the image; replicas mount the bundle read-only.
    pub async fn containerize(&self, bundle: &WeightBundle, profile: &str) -> Result<ImageBuild, RuntimeError> {
        if !bundle.sealed {
            return Err(RuntimeError::BundleNotSealed {
                model_id: bundle.model_id.clone(),
                version: bundle.version.clone(),
            });
        }
        self.engine.ping().await?;
        let weights_digest = bundle.weights_digest();
        let image_ref = Self::image_ref_for(profile, &weights_digest);
        let base = self
            .config
            .base_images
            .get(profile)
            .cloned()
            .unwrap_or_else(|| format!("modelhub/{profile}-base:latest"));
        let spec = ImageSpec {
            tag: image_ref.clone(),
            base,
            labels: BTreeMap::from([
                ("modelhub.model_id".to_owned(), bundle.model_id.clone()),
                ("modelhub.version".to_owned(), bundle.version.clone()),
                ("modelhub.weights_digest".to_owned(), weights_digest.clone()),
            ]),
        };
        self.engine.build_image(&spec).await?;
        Ok(ImageBuild {
            image_ref,
            weights_digest,
        })
    }

    /// Creates and starts one replica and waits for it to pass a health
    /// probe. On timeout the container is torn down.
    pub async fn start_replica(
        &self,
        model_id: &str,
        version: &str,
        image_ref: &str,
        weights_dir: &str,
    ) -> Result<ReplicaHandle, RuntimeError> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let replica_id = container_name(&format!("{model_id}-{version}-r{n}"));
        let mut env = vec![
            format!("{}={model_id}", stub::ENV_MODEL_ID),
            format!("{}={version}", stub::ENV_MODEL_VERSION),
        ];
        if let Some(vars) = self.env_overrides.lock().get(&(model_id.to_owned(), version.to_owned())) {
            env.extend(vars.iter().map(|(k, v)| format!("{k}={v}")));
        }
        let labels = BTreeMap::from([
            ("modelhub.model_id".to_owned(), model_id.to_owned()),
            ("modelhub.version".to_owned(), version.to_owned()),
            ("modelhub.replica_id".to_owned(), replica_id.clone()),
        ]);
        let request = CreateRequest::replica(image_ref, weights_dir, env, labels);
        let container_id = self.engine.create(&replica_id, &request).await?;
        self.emit(&replica_id, RuntimeEventKind::Created, &container_id);

        let started = async {
            self.engine.start(&container_id).await?;
            self.engine.endpoint(&container_id).await
        }
        .await;
        let endpoint = match started {
            Ok(e) => e,
            Err(e) => {
                self.teardown(&container_id).await;
                self.emit(&replica_id, RuntimeEventKind::Died, &e.to_string());
                return Err(e.into());
            }
        };
        if let Some((host, _)) = endpoint.rsplit_once(':') {
            let host = host.trim_start_matches('[').trim_end_matches(']');
            if host.parse::<std::net::IpAddr>().is_ok_and(|ip| !ip.is_loopback()) {
                self.http.egress().register_internal_host(host);
            }
        }
        let handle = ReplicaHandle {
            replica_id: replica_id.clone(),
            container_id: container_id.clone(),
            model_id: model_id.to_owned(),
            version: version.to_owned(),
            endpoint,
            state: ReplicaState::Starting,
            started_at: now_utc(),
        };

        let deadline = tokio::time::Instant::now() + self.config.startup_timeout;
        let mut last = HealthStatus::Fail("never probed".into());
        while tokio::time::Instant::now() < deadline {
            last = self.probe_health(&handle).await;
            if last == HealthStatus::Pass {
                let replica = Arc::new(Replica::new(ReplicaHandle {
                    state: ReplicaState::Healthy,
                    ..handle
                }));
                let out = replica.handle();
                self.replicas.write().insert(replica_id, replica);
                return Ok(out);
            }
            tokio::time::sleep(self.config.startup_poll).await;
        }
        self.teardown(&container_id).await;
        let reason = match last {
            HealthStatus::Fail(r) => r,
            HealthStatus::Pass => unreachable!(),
        };
        self.emit(&replica_id, RuntimeEventKind::Died, &format!("startup timeout: {reason}"));
        Err(RuntimeError::StartupTimeout { replica_id, reason })
    }

    async fn teardown(&self, container_id: &str) {
        let _ = self.engine.stop(container_id, 0).await;
        let _ = self.engine.remove(container_id).await;
    }

    /// Drain stops admitting work, waits for in-flight batches (bounded by
    /// the drain timeout) and then stops; Kill stops at once, failing
    /// whatever is in flight.
    pub async fn stop_replica(&self, replica_id: &str, mode: StopMode) -> Result<ReplicaHandle, RuntimeError> {
        let replica = self
            .replica(replica_id)
            .ok_or_else(|| RuntimeError::UnknownReplica(replica_id.to_owned()))?;
        let _serial = replica.lifecycle.lock().await;
        if !self.replicas.read().contains_key(replica_id) {
            return Err(RuntimeError::UnknownReplica(replica_id.to_owned()));
        }
        let container_id = replica.handle().container_id;
        match mode {
            StopMode::Drain => {
                let in_flight = replica.in_flight();
                replica.set_state(ReplicaState::Draining);
                let idle = replica.wait_idle(self.config.drain_timeout).await;
                let detail = if idle {
                    format!("{in_flight} in flight at drain start")
                } else {
                    format!("drain timeout with {} still in flight", replica.in_flight())
                };
                self.emit(replica_id, RuntimeEventKind::Drained, &detail);
                let stopped = self.engine.stop(&container_id, 10).await;
                let removed = self.engine.remove(&container_id).await;
                stopped.and(removed)?;
            }
            StopMode::Kill => {
                replica.set_state(ReplicaState::Stopped);
                self.teardown(&container_id).await;
            }
        }
        replica.set_state(ReplicaState::Stopped);
        self.replicas.write().remove(replica_id);
        self.emit(replica_id, RuntimeEventKind::Stopped, &format!("{mode:?}"));
        Ok(replica.handle())
    }

    /// One `GET /healthz` with the probe timeout. Never fails; unreachable
    /// replicas report `Fail`.
    pub async fn probe_health(&self, handle: &ReplicaHandle) -> HealthStatus {
        let url = format!("http://{}{HEALTH_PATH}", handle.endpoint);
        let status = match self.http.probe(&url) {
            Err(denied) => HealthStatus::Fail(denied.to_string()),
            Ok(req) => match req.timeout(self.config.health_timeout).send().await {
                Ok(resp) if resp.status() == reqwest::StatusCode::OK => HealthStatus::Pass,
                Ok(resp) => HealthStatus::Fail(format!("status {}", resp.status().as_u16())),
                Err(e) if e.is_connect() => HealthStatus::Fail("connection refused".into()),
                Err(e) if e.is_timeout() => HealthStatus::Fail("timeout".into()),
                Err(e) => HealthStatus::Fail(e.to_string()),
            },
        };
        match &status {
            HealthStatus::Pass => self.emit(&handle.replica_id, RuntimeEventKind::HealthPass, ""),
            HealthStatus::Fail(r) => self.emit(&handle.replica_id, RuntimeEventKind::HealthFail, r),
        }
        status
    }

    /// Probes every healthy replica once; replicas that reach the failure
    /// threshold are declared dead and their containers removed.
    pub async fn health_sweep(&self) {
        let replicas: Vec<Arc<Replica>> = self.replicas.read().values().cloned().collect();
        for replica in replicas {
            if !replica.is_healthy() {
                continue;
            }
            match self.probe_health(&replica.handle()).await {
                HealthStatus::Pass => replica.failures.store(0, Ordering::Relaxed),
                HealthStatus::Fail(reason) => {
                    let n = replica.failures.fetch_add(1, Ordering::Relaxed) + 1;
                    if n >= self.config.dead_after {
                        self.declare_dead(&replica, reason).await;
                    }
                }
            }
        }
    }

    async fn declare_dead(&self, replica: &Arc<Replica>, reason: String) {
        let _serial = replica.lifecycle.lock().await;
        let handle = replica.handle();
        replica.set_state(ReplicaState::Dead(reason.clone()));
        self.teardown(&handle.container_id).await;
        self.replicas.write().remove(&handle.replica_id);
        self.emit(&handle.replica_id, RuntimeEventKind::Died, &reason);
    }

    pub fn spawn_health_monitor(self: &Arc<Self>) -> tokio::task::JoinHandle<()> {
        let this = Arc::downgrade(self);
        let interval = self.config.health_interval;
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(interval);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            tick.tick().await;
            loop {
                tick.tick().await;
                let Some(this) = this.upgrade() else { break };
                this.health_sweep().await;
            }
        })
    }

    pub fn replica(&self, replica_id: &str) -> Option<Arc<Replica>> {
        self.replicas.read().get(replica_id).cloned()
    }

    pub fn all_replicas(&self) -> Vec<Arc<Replica>> {
        self.replicas.read().values().cloned().collect()
    }

    pub fn replicas_of(&self, model_id: &str, version: Option<&str>) -> Vec<Arc<Replica>> {
        self.replicas
            .read()
            .values()
            .filter(|r| {
                let h = r.handle.lock();
                h.model_id == model_id && version.is_none_or(|v| v == h.version)
            })
            .cloned()
            .collect()
    }

    pub fn healthy_replicas(&self, model_id: &str, version: &str) -> Vec<Arc<Replica>> {
        self.replicas_of(model_id, Some(version))
            .into_iter()
            .filter(|r| r.is_healthy())
            .collect()
    }

    pub async fn stats(&self, handle: &ReplicaHandle) -> Result<ContainerStats, RuntimeError> {
        Ok(self.engine.stats(&handle.container_id).await?)
    }

    /// Stops every replica, returning how many were stopped.
    pub async fn stop_all(&self, mode: StopMode) -> usize {
        let ids: Vec<String> = self.replicas.read().keys().cloned().collect();
        let stops = ids.iter().map(|id| self.stop_replica(id, mode));
        futures::future::join_all(stops)
            .await
            .into_iter()
            .filter(Result::is_ok)
            .count()
    }

    pub fn events(&self) -> Vec<RuntimeEvent> {
        self.events.lock().clone()
    }

    fn emit(&self, replica_id: &str, kind: RuntimeEventKind, detail: &str) {
        self.events.lock().push(RuntimeEvent {
            ts_ms: now_ms(),
            replica_id: replica_id.to_owned(),
            kind,
            detail: detail.to_owned(),
        });
    }
}
