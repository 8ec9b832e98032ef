//! The hub: one object owning every plane, enforcing the cross-plane
//! rules (registry status gates, audit entries) that no single plane can.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::acquisition::{AcquisitionConfig, AcquisitionError, Acquirer, DownloadProgress, MANIFEST_FILE};
use crate::digest::sha256_hex;
use crate::error::HubError;
use crate::evaluation::{
    AuditKind, AuditLog, AuditVerdict, CaseRecord, EvaluationStore, ScoreDistribution, ScoreDraft, ScoreEvent,
    ScoreFilter,
};
use crate::gateway::{
    Gateway, GatewayConfig, GatewayError, ImagePayload, InferenceJob, InferenceResult, LaunchSpec, SwapReport,
};
use crate::net::{Egress, HttpClient};
use crate::registry::{seed_fixtures, ModelRecord, ModelSource, ModelStatus, Registry, RegistryError, RegistryPaths};
use crate::runtime::{ContainerRuntime, RuntimeConfig, RuntimeError, RuntimeManager, StopMode};
use crate::telemetry::{SeriesRow, Telemetry, DEFAULT_RING_CAPACITY};
use crate::time::now_ms;

pub const AUDIT_FILE: &str = "audit.log";
pub const SCORES_FILE: &str = "scores.journal";

#[derive(Debug, Clone)]
pub struct HubConfig {
    /// Registry journal, audit log and score journal live here; `None`
    /// keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub blob_root: PathBuf,
    pub allow_outbound: bool,
    pub hub_base_url: String,
    pub runtime_profile: String,
    pub runtime: RuntimeConfig,
    pub gateway: GatewayConfig,
    pub telemetry_interval: Duration,
    pub ring_capacity: usize,
    /// Identity stamped on registrations and acquisitions.
    pub operator: String,
    pub seed_fixtures: bool,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            blob_root: PathBuf::from("blobs"),
            allow_outbound: false,
            hub_base_url: "https://huggingface.co".into(),
            runtime_profile: "stub".into(),
            runtime: RuntimeConfig::default(),
            gateway: GatewayConfig::default(),
            telemetry_interval: Duration::from_secs(1),
            ring_capacity: DEFAULT_RING_CAPACITY,
            operator: "operator".into(),
            seed_fixtures: false,
        }
    }
}

/// An image plus prompt aimed at one model, as received from a client.
#[derive(Debug, Clone)]
pub struct AnalyzeRequest {
    pub model_id: String,
    pub version: Option<String>,
    pub prompt: String,
    pub image: Vec<u8>,
    pub media_type: Option<String>,
    pub deadline_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelView {
    #[serde(flatten)]
    pub record: ModelRecord,
    pub progress: Option<DownloadProgress>,
    pub replicas: usize,
    pub active: bool,
}

pub struct Hub {
    config: HubConfig,
    egress: Arc<Egress>,
    registry: Mutex<Registry>,
    evaluation: Mutex<EvaluationStore>,
    audit: Arc<AuditLog>,
    acquirer: Acquirer,
    runtime: Arc<RuntimeManager>,
    gateway: Arc<Gateway>,
    telemetry: Arc<Telemetry>,
    background: Mutex<Vec<tokio::task::JoinHandle<()>>>,
}

impl std::fmt::Debug for Hub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hub").field("data_dir", &self.config.data_dir).finish()
    }
}

impl Drop for Hub {
    fn drop(&mut self) {
        for task in self.background.lock().drain(..) {
            task.abort();
        }
    }
}

impl Hub {
    /// Opens (or creates) the hub's stores and reconciles persisted state:
    /// nothing runs after a restart, so `Running` records become `Stopped`
    /// and interrupted acquisitions become `Failed`.
    pub fn open(config: HubConfig, engine: Arc<dyn ContainerRuntime>) -> Result<Self, HubError> {
        Self::open_with_egress(config, engine, None)
    }

    /// As [`Hub::open`], sharing an existing egress recorder.
    pub fn open_with_egress(
        config: HubConfig,
        engine: Arc<dyn ContainerRuntime>,
        egress: Option<Arc<Egress>>,
    ) -> Result<Self, HubError> {
        let (registry, evaluation, audit) = match &config.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(RegistryError::Io)?;
                (
                    Registry::open(&RegistryPaths::in_dir(dir))?,
                    EvaluationStore::open(&dir.join(SCORES_FILE))?,
                    AuditLog::open(&dir.join(AUDIT_FILE))?,
                )
            }
            None => (Registry::in_memory(), EvaluationStore::in_memory(), AuditLog::in_memory()),
        };
        let egress = egress.unwrap_or_else(|| Egress::new(config.allow_outbound));
        let http = HttpClient::new(egress.clone());
        let runtime = Arc::new(RuntimeManager::new(engine, http.clone(), config.runtime.clone()));
        let telemetry = Arc::new(Telemetry::new(config.ring_capacity));
        let audit = Arc::new(audit);
        let gateway = Arc::new(Gateway::new(
            runtime.clone(),
            http.clone(),
            telemetry.clone(),
            audit.clone(),
            config.gateway.clone(),
        ));
        let acquirer = Acquirer::new(
            AcquisitionConfig {
                allow_outbound: config.allow_outbound,
                blob_root: config.blob_root.clone(),
                hub_base_url: config.hub_base_url.clone(),
            },
            http,
        );
        let hub = Self {
            config,
            egress,
            registry: Mutex::new(registry),
            evaluation: Mutex::new(evaluation),
            audit,
            acquirer,
            runtime,
            gateway,
            telemetry,
            background: Mutex::new(Vec::new()),
        };
        hub.reconcile()?;
        if hub.config.seed_fixtures && hub.registry.lock().is_empty() {
            for (source, name, version) in seed_fixtures() {
                hub.register_model(source, name, version)?;
            }
        }
        Ok(hub)
    }

    fn reconcile(&self) -> Result<(), HubError> {
        let mut reg = self.registry.lock();
        let stale: Vec<(String, String, ModelStatus)> = reg
            .records()
            .iter()
            .filter_map(|r| match r.status {
                ModelStatus::Running => Some((r.model_id.clone(), r.version.clone(), ModelStatus::Stopped)),
                ModelStatus::Acquiring => Some((
                    r.model_id.clone(),
                    r.version.clone(),
                    ModelStatus::Failed("acquisition interrupted by restart".into()),
                )),
                _ => None,
            })
            .collect();
        for (id, version, to) in stale {
            reg.transition_status(&id, &version, to)?;
        }
        Ok(())
    }

    /// Starts the health monitor, the autoscaler and the telemetry sampler.
    pub fn start_background(self: &Arc<Self>) {
        let mut tasks = self.background.lock();
        tasks.push(self.runtime.spawn_health_monitor());
        tasks.push(self.gateway.spawn_autoscaler());
        let weak = Arc::downgrade(self);
        let interval = self.config.telemetry_interval;
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(interval);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tick.tick().await;
                let Some(hub) = weak.upgrade() else { break };
                hub.telemetry.sample_tick(&hub.runtime, now_ms()).await;
            }
        }));
    }

    /// Drains every replica and stops background tasks.
    pub async fn shutdown(&self) {
        for task in self.background.lock().drain(..) {
            task.abort();
        }
        for model in self.gateway.routed_models() {
            self.gateway.deactivate(&model);
        }
        self.runtime.stop_all(StopMode::Drain).await;
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    pub fn egress(&self) -> &Arc<Egress> {
        &self.egress
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    pub fn runtime(&self) -> &Arc<RuntimeManager> {
        &self.runtime
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn telemetry(&self) -> &Arc<Telemetry> {
        &self.telemetry
    }

    pub fn acquirer(&self) -> &Acquirer {
        &self.acquirer
    }

    fn record(&self, model_id: &str, version: &str) -> Result<ModelRecord, HubError> {
        self.registry
            .lock()
            .get(model_id, version)
            .cloned()
            .ok_or_else(|| {
                RegistryError::UnknownModel {
                    model_id: model_id.to_owned(),
                    version: version.to_owned(),
                }
                .into()
            })
    }

    fn log(&self, kind: AuditKind, payload: serde_json::Value) -> Result<String, HubError> {
        Ok(self.audit.append(kind, payload)?.id())
    }

    fn log_access(&self, model_id: &str, version: &str, audit_id: &str, acquired: Option<(String, String)>) -> Result<(), HubError> {
        self.registry.lock().record_access(model_id, version, audit_id, acquired)?;
        Ok(())
    }

    // Registry

    pub fn register_model(&self, source: ModelSource, display_name: &str, version: &str) -> Result<ModelRecord, HubError> {
        let record = self
            .registry
            .lock()
            .register_model(source, display_name, version, &self.config.operator)?;
        let audit_id = self.log(
            AuditKind::Registration,
            json!({
                "model_id": record.model_id,
                "version": record.version,
                "source": record.source.canonical(),
                "operator": self.config.operator,
            }),
        )?;
        self.log_access(&record.model_id, &record.version, &audit_id, None)?;
        self.record(&record.model_id, &record.version)
    }

    pub fn list_models(&self, filter: Option<&ModelStatus>) -> Vec<ModelView> {
        let records = self.registry.lock().list_models(filter);
        records.into_iter().map(|r| self.view(r)).collect()
    }

    pub fn model(&self, model_id: &str, version: &str) -> Result<ModelView, HubError> {
        Ok(self.view(self.record(model_id, version)?))
    }

    fn view(&self, record: ModelRecord) -> ModelView {
        ModelView {
            progress: self.acquirer.progress(&record.model_id, &record.version),
            replicas: self.runtime.healthy_replicas(&record.model_id, &record.version).len(),
            active: self.gateway.active_version(&record.model_id).as_deref() == Some(record.version.as_str()),
            record,
        }
    }

    // Acquisition and containerization

    /// Fetches or imports the weights, seals them and builds the serving
    /// image. Any failure leaves the record `Failed`, from which a later
    /// call retries.
    pub async fn acquire(&self, model_id: &str, version: &str) -> Result<ModelRecord, HubError> {
        let record = self
            .registry
            .lock()
            .transition_status(model_id, version, ModelStatus::Acquiring)?;
        match self.acquire_inner(&record).await {
            Ok(r) => Ok(r),
            Err(e) => {
                let reason = e.to_string();
                let _ = self.log(
                    AuditKind::Acquisition,
                    json!({"model_id": model_id, "version": version, "outcome": "failed", "reason": reason}),
                );
                self.registry
                    .lock()
                    .transition_status(model_id, version, ModelStatus::Failed(reason))?;
                Err(e)
            }
        }
    }

    async fn acquire_inner(&self, record: &ModelRecord) -> Result<ModelRecord, HubError> {
        let acquired = self.acquirer.acquire(record).await?;
        let bundle = &acquired.bundle;
        let digest = bundle.weights_digest();
        let acquired_from = match &record.source {
            ModelSource::RemoteHub { repo_id } => {
                format!("{}/{repo_id}", self.config.hub_base_url.trim_end_matches('/'))
            }
            ModelSource::LocalPath { path } => path.clone(),
        };
        let audit_id = self.log(
            AuditKind::Acquisition,
            json!({
                "model_id": record.model_id,
                "version": record.version,
                "outcome": "sealed",
                "acquired_from": acquired_from,
                "weights_digest": digest,
                "files": bundle.manifest.len(),
                "total_bytes": bundle.total_bytes,
                "bytes_fetched": acquired.bytes_fetched,
            }),
        )?;
        self.log_access(
            &record.model_id,
            &record.version,
            &audit_id,
            Some((acquired_from, self.config.operator.clone())),
        )?;
        let image = self.runtime.containerize(bundle, &self.config.runtime_profile).await?;
        Ok(self
            .registry
            .lock()
            .mark_containerized(&record.model_id, &record.version, &image.weights_digest, &image.image_ref)?)
    }

    fn launch_spec(&self, record: &ModelRecord) -> LaunchSpec {
        LaunchSpec {
            image_ref: record.image_ref.clone(),
            weights_dir: self
                .acquirer
                .bundle_dir(&record.model_id, &record.version)
                .to_string_lossy()
                .into_owned(),
        }
    }

    /// Rebuilds the serving image from the sealed bundle. Builds are
    /// content-addressed, so this is cheap when the engine still has it,
    /// and it refuses a bundle whose manifest drifted from the record.
    async fn ensure_image(&self, record: &ModelRecord) -> Result<(), HubError> {
        let bundle = self
            .acquirer
            .load_bundle(&record.model_id, &record.version)
            .ok_or_else(|| RuntimeError::BundleNotSealed {
                model_id: record.model_id.clone(),
                version: record.version.clone(),
            })?;
        if record.weights_digest.as_deref() != Some(bundle.weights_digest().as_str()) {
            return Err(AcquisitionError::DigestMismatch { file: MANIFEST_FILE.into() }.into());
        }
        self.runtime.containerize(&bundle, &self.config.runtime_profile).await?;
        Ok(())
    }

    fn require(&self, record: &ModelRecord, action: &'static str, allowed: &[ModelStatus], expected: &'static str) -> Result<(), HubError> {
        if allowed.contains(&record.status) {
            Ok(())
        } else {
            Err(HubError::WrongStatus {
                model_id: record.model_id.clone(),
                version: record.version.clone(),
                status: record.status.to_string(),
                action,
                expected,
            })
        }
    }

    // Runtime

    /// Starts `replicas` replicas (default: the autoscaler minimum) and
    /// routes the model to this version.
    pub async fn start(&self, model_id: &str, version: &str, replicas: Option<usize>) -> Result<ModelRecord, HubError> {
        let record = self.record(model_id, version)?;
        self.require(
            &record,
            "start",
            &[ModelStatus::Containerized, ModelStatus::Stopped, ModelStatus::Running],
            "Containerized, Stopped or Running",
        )?;
        if let Some(active) = self.gateway.active_version(model_id).filter(|v| v != version) {
            return Err(HubError::WrongStatus {
                model_id: model_id.to_owned(),
                version: version.to_owned(),
                status: format!("{:?} while {active} is active", record.status.name()),
                action: "start",
                expected: "no other active version (use swap)",
            });
        }
        if record.status != ModelStatus::Running {
            self.ensure_image(&record).await?;
        }
        let n = replicas.unwrap_or(self.config.gateway.scale.min_replicas as usize).max(1);
        self.gateway.activate(model_id, version, self.launch_spec(&record));
        if let Err(e) = self.gateway.scale_to(model_id, n).await {
            if self.runtime.healthy_replicas(model_id, version).is_empty() {
                self.gateway.deactivate(model_id);
            }
            return Err(e.into());
        }
        if record.status == ModelStatus::Running {
            return Ok(record);
        }
        Ok(self
            .registry
            .lock()
            .transition_status(model_id, version, ModelStatus::Running)?)
    }

    /// Drains the version's replicas and stops routing to it.
    pub async fn stop(&self, model_id: &str, version: &str) -> Result<ModelRecord, HubError> {
        let record = self.record(model_id, version)?;
        self.require(&record, "stop", &[ModelStatus::Running], "Running")?;
        if self.gateway.active_version(model_id).as_deref() == Some(version) {
            self.gateway.deactivate(model_id);
        }
        let ids: Vec<String> = self.runtime.replicas_of(model_id, Some(version)).iter().map(|r| r.id()).collect();
        futures::future::join_all(ids.iter().map(|id| self.runtime.stop_replica(id, StopMode::Drain))).await;
        Ok(self
            .registry
            .lock()
            .transition_status(model_id, version, ModelStatus::Stopped)?)
    }

    /// Blue-green swap of a running model to `new_version`.
    pub async fn swap(&self, model_id: &str, new_version: &str) -> Result<SwapReport, HubError> {
        let target = self.registry.lock().get(model_id, new_version).cloned();
        let Some(target) = target else {
            if !self.registry.lock().contains_model(model_id) {
                return Err(GatewayError::UnknownModel(model_id.to_owned()).into());
            }
            return Err(GatewayError::UnknownVersion {
                model_id: model_id.to_owned(),
                version: new_version.to_owned(),
            }
            .into());
        };
        let active = self
            .gateway
            .active_version(model_id)
            .ok_or_else(|| GatewayError::ModelNotRunning(model_id.to_owned()))?;
        if active != new_version {
            self.require(
                &target,
                "swap",
                &[ModelStatus::Containerized, ModelStatus::Stopped],
                "Containerized or Stopped",
            )?;
            self.ensure_image(&target).await?;
        }
        match self.gateway.hot_swap(model_id, new_version, self.launch_spec(&target)).await {
            Ok(report) => {
                let audit_id = self.log(
                    AuditKind::Swap,
                    json!({
                        "model_id": model_id,
                        "old_version": report.old_version,
                        "new_version": report.new_version,
                        "drained_jobs": report.drained_jobs,
                        "outcome": "swapped",
                    }),
                )?;
                if report.old_version != report.new_version {
                    let mut reg = self.registry.lock();
                    reg.transition_status(model_id, new_version, ModelStatus::Running)?;
                    reg.transition_status(model_id, &report.old_version, ModelStatus::Stopped)?;
                    reg.record_access(model_id, new_version, &audit_id, None)?;
                    reg.record_access(model_id, &report.old_version, &audit_id, None)?;
                }
                Ok(report)
            }
            Err(e) => {
                self.log(
                    AuditKind::Swap,
                    json!({
                        "model_id": model_id,
                        "old_version": active,
                        "new_version": new_version,
                        "outcome": "rolled_back",
                        "reason": e.to_string(),
                    }),
                )?;
                Err(e.into())
            }
        }
    }

    // Gateway

    pub async fn analyze(&self, req: AnalyzeRequest) -> Result<InferenceResult, HubError> {
        {
            let reg = self.registry.lock();
            if !reg.contains_model(&req.model_id) {
                return Err(GatewayError::UnknownModel(req.model_id).into());
            }
            if let Some(v) = &req.version {
                if reg.get(&req.model_id, v).is_none() {
                    return Err(GatewayError::UnknownVersion {
                        model_id: req.model_id,
                        version: v.clone(),
                    }
                    .into());
                }
            }
        }
        let image = ImagePayload::from_bytes(req.image, req.media_type.as_deref()).map_err(GatewayError::from)?;
        let job = InferenceJob {
            job_id: format!("job-{}", uuid::Uuid::new_v4().simple()),
            model_id: req.model_id,
            version: req.version,
            prompt: req.prompt,
            image,
            submitted_at: now_ms(),
            deadline_ms: req.deadline_ms,
        };
        Ok(self.gateway.submit(job).await?)
    }

    // Telemetry

    pub fn telemetry_series(&self, model_id: &str, from_ms: i64, to_ms: i64) -> Result<Vec<SeriesRow>, HubError> {
        if !self.registry.lock().contains_model(model_id) {
            return Err(GatewayError::UnknownModel(model_id.to_owned()).into());
        }
        Ok(self.telemetry.export_series(model_id, from_ms, to_ms))
    }

    // Evaluation

    pub fn ingest_cases(&self, manifest: &str, base_dir: &Path) -> Result<Vec<CaseRecord>, HubError> {
        Ok(self.evaluation.lock().ingest_cases(manifest, base_dir)?)
    }

    pub fn case_count(&self) -> usize {
        self.evaluation.lock().case_count()
    }

    pub fn submit_score(&self, draft: ScoreDraft) -> Result<ScoreEvent, HubError> {
        let known = self.registry.lock().get(&draft.model_id, &draft.version).is_some();
        let event = self.evaluation.lock().submit_score(draft, |_, _| known)?;
        self.log(
            AuditKind::Score,
            json!({
                "score_id": event.score_id,
                "clinician_id": event.clinician_id,
                "case_id": event.case_id,
                "model_id": event.model_id,
                "version": event.version,
                "score": event.score,
            }),
        )?;
        Ok(event)
    }

    pub fn aggregate_scores(&self, filter: &ScoreFilter) -> ScoreDistribution {
        self.evaluation.lock().aggregate_scores(filter)
    }

    pub fn export_scores_csv(&self) -> Result<String, HubError> {
        let (doc, rows) = {
            let eval = self.evaluation.lock();
            (eval.export_scores_csv(), eval.current_scores().len())
        };
        self.log(
            AuditKind::Export,
            json!({"format": "csv", "rows": rows, "sha256": sha256_hex(doc.as_bytes())}),
        )?;
        Ok(doc)
    }

    pub fn verify_audit(&self) -> AuditVerdict {
        self.audit.verify()
    }
}
