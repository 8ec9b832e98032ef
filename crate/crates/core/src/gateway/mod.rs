//! The inference gateway: one entry point over every running model.
//!
//! Each routed model has a scheduler task that feeds jobs through a
//! [`Batcher`] and dispatches closed batches to healthy replicas of the
//! active version, round-robin. A batch whose replica fails is retried once
//! on a different replica. Hot swaps are blue-green: the new version is
//! started and proven healthy before routing flips, then the old replicas
//! drain.

pub mod autoscale;
pub mod batching;
pub mod job;
pub mod wire;

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use base64::Engine as _;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, oneshot};

use crate::digest::sha256_hex;
use crate::evaluation::{AuditKind, AuditLog};
use crate::net::HttpClient;
use crate::runtime::{InFlight, RuntimeManager, StopMode};
use crate::telemetry::Telemetry;
use crate::time::now_ms;

pub use autoscale::{autoscale_step, replay as replay_autoscale, ScalePolicy, ScaleState};
pub use batching::{form_batches, Batch, BatchPolicy, Batcher};
pub use job::{ImagePayload, InferenceJob, InferenceResult, JobError, MediaType};
use wire::{BatchItem, BatchRequest, BatchResponse, INFER_BATCH_PATH};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("model {0} has no healthy replica")]
    ModelNotRunning(String),
    #[error("unknown version {version} of {model_id}")]
    UnknownVersion { model_id: String, version: String },
    #[error("replica lost: {0}")]
    ReplicaLost(String),
    #[error("deadline of {0} ms exceeded")]
    DeadlineExceeded(u64),
    #[error("swap failed and was rolled back: {0}")]
    SwapFailedRolledBack(String),
    #[error("invalid job: {0}")]
    InvalidJob(#[from] JobError),
    #[error("audit append failed: {0}")]
    Audit(String),
}

/// How to start replicas of one model version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchSpec {
    pub image_ref: String,
    pub weights_dir: String,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub batch: BatchPolicy,
    pub scale: ScalePolicy,
    /// Bound of each model's submission queue.
    pub queue_capacity: usize,
    pub autoscale_interval: Duration,
    /// How long a dispatch waits for a replica slot before giving up.
    pub route_wait: Duration,
    pub replica_timeout: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            batch: BatchPolicy::default(),
            scale: ScalePolicy::default(),
            queue_capacity: 1024,
            autoscale_interval: Duration::from_secs(1),
            route_wait: Duration::from_secs(2),
            replica_timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapReport {
    pub old_version: String,
    pub new_version: String,
    /// Jobs in flight on the old version when routing flipped.
    pub drained_jobs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDecision {
    pub ts_ms: i64,
    pub model_id: String,
    pub queue_depth_avg: f64,
    pub from: u32,
    pub to: u32,
}

/// One dispatch attempt, recorded in the inference audit entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub replica_id: String,
    pub outcome: String,
}

#[derive(Debug)]
struct Completed {
    output_text: String,
    version: String,
    replica_id: String,
    batch_id: String,
    attempts: Vec<Attempt>,
}

type Reply = oneshot::Sender<Result<Completed, GatewayError>>;

struct Pending {
    job: InferenceJob,
    reply: Reply,
}

/// Routing state shared by a model's scheduler and the gateway.
#[derive(Debug)]
struct RouteState {
    model_id: String,
    active: RwLock<String>,
    specs: RwLock<HashMap<String, LaunchSpec>>,
    queued: AtomicUsize,
    in_flight: Mutex<HashMap<String, usize>>,
    rr: AtomicUsize,
    swapping: AtomicBool,
    swap_lock: tokio::sync::Mutex<()>,
    scale: Mutex<ScaleState>,
}

impl RouteState {
    fn in_flight_total(&self) -> usize {
        self.in_flight.lock().values().sum()
    }

    fn in_flight_of(&self, version: &str) -> usize {
        self.in_flight.lock().get(version).copied().unwrap_or(0)
    }

    fn add_in_flight(&self, version: &str, n: usize, up: bool) {
        let mut map = self.in_flight.lock();
        let v = map.entry(version.to_owned()).or_default();
        *v = if up { *v + n } else { v.saturating_sub(n) };
    }
}

struct Route {
    state: Arc<RouteState>,
    tx: mpsc::Sender<Pending>,
    scheduler: tokio::task::JoinHandle<()>,
}

impl Drop for Route {
    fn drop(&mut self) {
        self.scheduler.abort();
    }
}

/// Everything a dispatch needs; deliberately holds no routes.
struct Dispatcher {
    runtime: Arc<RuntimeManager>,
    http: HttpClient,
    config: GatewayConfig,
    batch_seq: AtomicU64,
}

pub struct Gateway {
    dispatcher: Arc<Dispatcher>,
    telemetry: Arc<Telemetry>,
    audit: Arc<AuditLog>,
    routes: RwLock<HashMap<String, Arc<Route>>>,
    decisions: Mutex<Vec<ScaleDecision>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("routes", &self.routes.read().keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Gateway {
    pub fn new(
        runtime: Arc<RuntimeManager>,
        http: HttpClient,
        telemetry: Arc<Telemetry>,
        audit: Arc<AuditLog>,
        config: GatewayConfig,
    ) -> Self {
        Self {
            dispatcher: Arc::new(Dispatcher {
                runtime,
                http,
                config,
                batch_seq: AtomicU64::new(0),
            }),
            telemetry,
            audit,
            routes: RwLock::new(HashMap::new()),
            decisions: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.dispatcher.config
    }

    pub fn runtime(&self) -> &Arc<RuntimeManager> {
        &self.dispatcher.runtime
    }

    fn route(&self, model_id: &str) -> Option<Arc<Route>> {
        self.routes.read().get(model_id).cloned()
    }

    /// Starts routing `model_id` to `version`. Replicas are started
    /// separately (see [`Gateway::scale_to`]).
    pub fn activate(&self, model_id: &str, version: &str, spec: LaunchSpec) {
        let mut routes = self.routes.write();
        if let Some(route) = routes.get(model_id) {
            route.state.specs.write().insert(version.to_owned(), spec);
            *route.state.active.write() = version.to_owned();
            return;
        }
        let state = Arc::new(RouteState {
            model_id: model_id.to_owned(),
            active: RwLock::new(version.to_owned()),
            specs: RwLock::new(HashMap::from([(version.to_owned(), spec)])),
            queued: AtomicUsize::new(0),
            in_flight: Mutex::new(HashMap::new()),
            rr: AtomicUsize::new(0),
            swapping: AtomicBool::new(false),
            swap_lock: tokio::sync::Mutex::new(()),
            scale: Mutex::new(ScaleState::default()),
        });
        let (tx, rx) = mpsc::channel(self.dispatcher.config.queue_capacity.max(1));
        let scheduler = tokio::spawn(schedule(self.dispatcher.clone(), state.clone(), rx));
        routes.insert(
            model_id.to_owned(),
            Arc::new(Route {
                state,
                tx,
                scheduler,
            }),
        );
    }

    /// Stops routing the model. Queued jobs fail with `ModelNotRunning`.
    pub fn deactivate(&self, model_id: &str) -> bool {
        self.routes.write().remove(model_id).is_some()
    }

    pub fn active_version(&self, model_id: &str) -> Option<String> {
        self.route(model_id).map(|r| r.state.active.read().clone())
    }

    pub fn routed_models(&self) -> Vec<String> {
        let mut v: Vec<String> = self.routes.read().keys().cloned().collect();
        v.sort();
        v
    }

    /// Queued plus in-flight jobs per healthy replica of the active version.
    pub fn queue_depth_avg(&self, model_id: &str) -> f64 {
        let Some(route) = self.route(model_id) else { return 0.0 };
        let active = route.state.active.read().clone();
        let healthy = self.runtime().healthy_replicas(model_id, &active).len().max(1);
        (route.state.queued.load(Ordering::Acquire) + route.state.in_flight_total()) as f64 / healthy as f64
    }

    /// Runs one job end to end and appends its audit entry.
    pub async fn submit(&self, job: InferenceJob) -> Result<InferenceResult, GatewayError> {
        job.validate()?;
        let route = self
            .route(&job.model_id)
            .ok_or_else(|| GatewayError::ModelNotRunning(job.model_id.clone()))?;
        if let Some(v) = &job.version {
            if !route.state.specs.read().contains_key(v) {
                return Err(GatewayError::UnknownVersion {
                    model_id: job.model_id.clone(),
                    version: v.clone(),
                });
            }
        }
        let started = Instant::now();
        let (reply, rx) = oneshot::channel();
        let deadline = job.deadline_ms;
        let meta = (
            job.job_id.clone(),
            job.model_id.clone(),
            sha256_hex(job.prompt.as_bytes()),
            sha256_hex(&job.image.bytes),
        );
        route.state.queued.fetch_add(1, Ordering::AcqRel);
        if route.tx.send(Pending { job, reply }).await.is_err() {
            route.state.queued.fetch_sub(1, Ordering::AcqRel);
            return Err(GatewayError::ModelNotRunning(meta.1));
        }
        drop(route);
        let outcome = match deadline {
            Some(ms) => tokio::time::timeout(Duration::from_millis(ms), rx)
                .await
                .map_err(|_| GatewayError::DeadlineExceeded(ms))?,
            None => rx.await,
        };
        let done = outcome.map_err(|_| GatewayError::ModelNotRunning(meta.1.clone()))??;
        let latency_ms = started.elapsed().as_millis() as u64;
        self.telemetry.observe_latency(&meta.1, latency_ms);

        let (job_id, model_id, prompt_sha256, image_sha256) = meta;
        let entry = self
            .audit
            .append(
                AuditKind::Inference,
                json!({
                    "job_id": job_id,
                    "model_id": model_id,
                    "version": done.version,
                    "replica_id": done.replica_id,
                    "batch_id": done.batch_id,
                    "latency_ms": latency_ms,
                    "prompt_sha256": prompt_sha256,
                    "image_sha256": image_sha256,
                    "output_sha256": sha256_hex(done.output_text.as_bytes()),
                    "attempts": done.attempts,
                }),
            )
            .map_err(|e| GatewayError::Audit(e.to_string()))?;
        Ok(InferenceResult {
            job_id,
            output_text: done.output_text,
            model_id,
            version: done.version,
            replica_id: done.replica_id,
            latency_ms,
            batch_id: done.batch_id,
            audit_id: entry.id(),
        })
    }

    /// Brings the active version to exactly `n` healthy replicas.
    pub async fn scale_to(&self, model_id: &str, n: usize) -> Result<usize, GatewayError> {
        let route = self
            .route(model_id)
            .ok_or_else(|| GatewayError::ModelNotRunning(model_id.to_owned()))?;
        let active = route.state.active.read().clone();
        let spec = route.state.specs.read().get(&active).cloned().ok_or_else(|| GatewayError::UnknownVersion {
            model_id: model_id.to_owned(),
            version: active.clone(),
        })?;
        let runtime = self.runtime();
        let current = runtime.healthy_replicas(model_id, &active);
        if current.len() < n {
            let starts = (current.len()..n).map(|_| runtime.start_replica(model_id, &active, &spec.image_ref, &spec.weights_dir));
            for r in futures::future::join_all(starts).await {
                r.map_err(|e| GatewayError::ModelNotRunning(format!("{model_id}: {e}")))?;
            }
        } else if current.len() > n {
            let mut ids: Vec<String> = current.iter().map(|r| r.id()).collect();
            ids.sort();
            let stops = ids[n..].iter().map(|id| runtime.stop_replica(id, StopMode::Drain));
            futures::future::join_all(stops).await;
        }
        Ok(runtime.healthy_replicas(model_id, &active).len())
    }

    /// Blue-green swap of the routed version. On failure the new replicas
    /// are removed and the old version keeps serving untouched.
    pub async fn hot_swap(&self, model_id: &str, new_version: &str, spec: LaunchSpec) -> Result<SwapReport, GatewayError> {
        let route = self
            .route(model_id)
            .ok_or_else(|| GatewayError::ModelNotRunning(model_id.to_owned()))?;
        let state = route.state.clone();
        drop(route);
        let _serial = state.swap_lock.lock().await;
        let old_version = state.active.read().clone();
        if old_version == new_version {
            return Ok(SwapReport {
                old_version,
                new_version: new_version.to_owned(),
                drained_jobs: 0,
            });
        }
        state.swapping.store(true, Ordering::Release);
        let result = self.swap_inner(&state, &old_version, new_version, spec).await;
        state.swapping.store(false, Ordering::Release);
        result
    }

    async fn swap_inner(
        &self,
        state: &RouteState,
        old_version: &str,
        new_version: &str,
        spec: LaunchSpec,
    ) -> Result<SwapReport, GatewayError> {
        let runtime = self.runtime();
        let model_id = &state.model_id;
        let n = runtime
            .healthy_replicas(model_id, old_version)
            .len()
            .max(self.config().scale.min_replicas as usize)
            .max(1);
        let starts = (0..n).map(|_| runtime.start_replica(model_id, new_version, &spec.image_ref, &spec.weights_dir));
        let mut started = Vec::new();
        let mut failure = None;
        for r in futures::future::join_all(starts).await {
            match r {
                Ok(h) => started.push(h.replica_id),
                Err(e) => failure = Some(e.to_string()),
            }
        }
        if let Some(reason) = failure {
            let stops = started.iter().map(|id| runtime.stop_replica(id, StopMode::Kill));
            futures::future::join_all(stops).await;
            return Err(GatewayError::SwapFailedRolledBack(reason));
        }

        state.specs.write().insert(new_version.to_owned(), spec);
        let drained_jobs = {
            let mut active = state.active.write();
            *active = new_version.to_owned();
            state.in_flight_of(old_version) as u64
        };
        let old: Vec<String> = runtime.replicas_of(model_id, Some(old_version)).iter().map(|r| r.id()).collect();
        let stops = old.iter().map(|id| runtime.stop_replica(id, StopMode::Drain));
        futures::future::join_all(stops).await;
        state.specs.write().remove(old_version);
        Ok(SwapReport {
            old_version: old_version.to_owned(),
            new_version: new_version.to_owned(),
            drained_jobs,
        })
    }

    /// One autoscaler pass over every routed model not mid-swap.
    pub async fn autoscale_tick(&self, now_ms: i64) -> Vec<ScaleDecision> {
        let policy = self.config().scale;
        let routes: Vec<Arc<Route>> = self.routes.read().values().cloned().collect();
        let mut out = Vec::new();
        for route in routes {
            let state = &route.state;
            let Ok(_serial) = state.swap_lock.try_lock() else { continue };
            let model_id = state.model_id.clone();
            let active = state.active.read().clone();
            let healthy = self.runtime().healthy_replicas(&model_id, &active).len() as u32;
            let depth = self.queue_depth_avg(&model_id);
            let target = {
                let mut scale = state.scale.lock();
                let (target, next) = autoscale_step(now_ms, depth, healthy, &policy, *scale);
                *scale = next;
                target
            };
            if target != healthy {
                let decision = ScaleDecision {
                    ts_ms: now_ms,
                    model_id: model_id.clone(),
                    queue_depth_avg: depth,
                    from: healthy,
                    to: target,
                };
                if let Err(e) = self.scale_to(&model_id, target as usize).await {
                    tracing::warn!(model_id, error = %e, "autoscale step failed");
                }
                self.decisions.lock().push(decision.clone());
                out.push(decision);
            }
        }
        out
    }

    pub fn scale_decisions(&self) -> Vec<ScaleDecision> {
        self.decisions.lock().clone()
    }

    pub fn spawn_autoscaler(self: &Arc<Self>) -> tokio::task::JoinHandle<()> {
        let this: Weak<Self> = Arc::downgrade(self);
        let interval = self.config().autoscale_interval;
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(interval);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                let Some(this) = this.upgrade() else { break };
                this.autoscale_tick(now_ms()).await;
            }
        })
    }
}

/// Per-model scheduler: the live driver of the [`Batcher`].
async fn schedule(dispatcher: Arc<Dispatcher>, state: Arc<RouteState>, mut rx: mpsc::Receiver<Pending>) {
    let origin = tokio::time::Instant::now();
    let clock = move || origin.elapsed().as_millis() as u64;
    let mut batcher: Batcher<Pending> = Batcher::new(dispatcher.config.batch);
    loop {
        let deadline = batcher.deadline_ms();
        tokio::select! {
            msg = rx.recv() => match msg {
                Some(p) => {
                    let now = clock();
                    if let Some(b) = batcher.poll(now) {
                        launch(&dispatcher, &state, b.jobs);
                    }
                    if let Some(b) = batcher.push(now, p) {
                        launch(&dispatcher, &state, b.jobs);
                    }
                }
                None => {
                    if let Some(b) = batcher.flush(clock()) {
                        launch(&dispatcher, &state, b.jobs);
                    }
                    break;
                }
            },
            _ = tokio::time::sleep_until(origin + Duration::from_millis(deadline.unwrap_or(0))), if deadline.is_some() => {
                if let Some(b) = batcher.poll(clock()) {
                    launch(&dispatcher, &state, b.jobs);
                }
            }
        }
    }
}

fn launch(dispatcher: &Arc<Dispatcher>, state: &Arc<RouteState>, jobs: Vec<Pending>) {
    state.queued.fetch_sub(jobs.len(), Ordering::AcqRel);
    let mut groups: Vec<(Option<String>, Vec<Pending>)> = Vec::new();
    for p in jobs {
        match groups.iter_mut().find(|(v, _)| *v == p.job.version) {
            Some((_, g)) => g.push(p),
            None => groups.push((p.job.version.clone(), vec![p])),
        }
    }
    for (version, group) in groups {
        let d = dispatcher.clone();
        let s = state.clone();
        tokio::spawn(async move { d.run_group(&s, version, group).await });
    }
}

impl Dispatcher {
    async fn run_group(&self, state: &RouteState, pinned: Option<String>, jobs: Vec<Pending>) {
        let jobs: Vec<Pending> = jobs.into_iter().filter(|p| !p.reply.is_closed()).collect();
        if jobs.is_empty() {
            return;
        }
        let batch_id = format!("batch-{}", self.batch_seq.fetch_add(1, Ordering::Relaxed));
        let request = BatchRequest {
            batch_id: batch_id.clone(),
            items: jobs
                .iter()
                .map(|p| BatchItem {
                    job_id: p.job.job_id.clone(),
                    prompt: p.job.prompt.clone(),
                    image_b64: base64::engine::general_purpose::STANDARD.encode(&p.job.image.bytes),
                    media_type: p.job.image.media_type.mime().to_owned(),
                })
                .collect(),
        };
        let mut attempts: Vec<Attempt> = Vec::new();
        let mut tried: HashSet<String> = HashSet::new();
        for _ in 0..2 {
            let Some((slot, version)) = self.pick(state, pinned.as_deref(), &tried).await else { break };
            let replica_id = slot.replica().id();
            let endpoint = slot.replica().endpoint();
            state.add_in_flight(&version, jobs.len(), true);
            let outcome = self.call(&endpoint, &request).await;
            state.add_in_flight(&version, jobs.len(), false);
            drop(slot);
            match outcome {
                Ok(resp) => {
                    attempts.push(Attempt {
                        replica_id: replica_id.clone(),
                        outcome: "ok".into(),
                    });
                    let mut texts: HashMap<String, String> = resp.items.into_iter().map(|i| (i.job_id, i.text)).collect();
                    for p in jobs {
                        let reply = match texts.remove(&p.job.job_id) {
                            Some(output_text) => Ok(Completed {
                                output_text,
                                version: version.clone(),
                                replica_id: replica_id.clone(),
                                batch_id: batch_id.clone(),
                                attempts: attempts.clone(),
                            }),
                            None => Err(GatewayError::ReplicaLost(format!("{replica_id} returned no result for {}", p.job.job_id))),
                        };
                        let _ = p.reply.send(reply);
                    }
                    return;
                }
                Err(reason) => {
                    attempts.push(Attempt {
                        replica_id: replica_id.clone(),
                        outcome: reason,
                    });
                    tried.insert(replica_id);
                }
            }
        }
        let err = match attempts.last() {
            None => GatewayError::ModelNotRunning(state.model_id.clone()),
            Some(a) => GatewayError::ReplicaLost(format!("{}: {}", a.replica_id, a.outcome)),
        };
        for p in jobs {
            let _ = p.reply.send(Err(err.clone()));
        }
    }

    /// Claims a slot on the next healthy replica, re-reading the active
    /// version on every round so a swap mid-wait is followed.
    async fn pick(&self, state: &RouteState, pinned: Option<&str>, tried: &HashSet<String>) -> Option<(InFlight, String)> {
        let give_up = Instant::now() + self.config.route_wait;
        loop {
            let version = pinned.map(str::to_owned).unwrap_or_else(|| state.active.read().clone());
            let mut replicas = self.runtime.healthy_replicas(&state.model_id, &version);
            replicas.retain(|r| !tried.contains(&r.id()));
            if !replicas.is_empty() {
                let start = state.rr.fetch_add(1, Ordering::Relaxed);
                for i in 0..replicas.len() {
                    if let Some(slot) = replicas[(start + i) % replicas.len()].try_acquire() {
                        return Some((slot, version));
                    }
                }
            }
            if Instant::now() >= give_up {
                return None;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }

    async fn call(&self, endpoint: &str, request: &BatchRequest) -> Result<BatchResponse, String> {
        let url = format!("http://{endpoint}{INFER_BATCH_PATH}");
        let resp = self
            .http
            .post(&url)
            .map_err(|e| e.to_string())?
            .timeout(self.config.replica_timeout)
            .json(request)
            .send()
            .await
            .map_err(|e| format!("transport: {e}"))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("status {}", status.as_u16()));
        }
        resp.json::<BatchResponse>().await.map_err(|e| format!("body: {e}"))
    }
}
