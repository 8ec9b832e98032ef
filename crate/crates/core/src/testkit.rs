//! Fixtures shared by unit, integration and acceptance tests: a loopback
//! model hub speaking the acquisition protocol, and tiny raster images.

use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use parking_lot::Mutex;

use crate::acquisition::{Manifest, ManifestEntry, WeightBundle};
use crate::digest::sha256_hex;
use crate::evaluation::AuditLog;
use crate::gateway::{Gateway, GatewayConfig, ImagePayload, InferenceJob, LaunchSpec};
use crate::net::{Egress, HttpClient};
use crate::runtime::mock::MockRuntime;
use crate::runtime::{RuntimeConfig, RuntimeManager};
use crate::telemetry::Telemetry;
use crate::time::now_ms;

/// Encodes a `w`×`h` RGB image in the given format.
pub fn raster(w: u32, h: u32, format: image::ImageFormat) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 40) as u8, (y * 40) as u8, 128]));
    let mut out = Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut out, format)
        .expect("in-memory encode");
    out.into_inner()
}

pub fn png_1x1() -> Vec<u8> {
    raster(1, 1, image::ImageFormat::Png)
}

/// Writes one PNG and a case manifest of `n` cases pointing at it;
/// returns the manifest text. Case ids are `{prefix}-{i:03}`.
pub fn case_manifest(dir: &Path, dataset: &str, prefix: &str, n: usize) -> String {
    let image = format!("{prefix}.png");
    std::fs::write(dir.join(&image), png_1x1()).expect("write fixture image");
    (0..n)
        .map(|i| {
            serde_json::json!({
                "case_id": format!("{prefix}-{i:03}"),
                "dataset": dataset,
                "image_path": image,
                "prompt": "Can you describe morphology changes in this image?",
                "source_note": "synthetic",
            })
            .to_string()
                + "\n"
        })
        .collect()
}

#[derive(Default)]
struct HubState {
    /// (repo_id, version) -> path -> bytes listed in the manifest.
    repos: HashMap<(String, String), Vec<(String, Vec<u8>)>>,
    /// Content actually served when it differs from the manifest.
    overrides: HashMap<(String, String, String), Vec<u8>>,
    requests: Vec<String>,
}

/// A loopback hub serving `/{repo}/manifest/{version}` and
/// `/{repo}/resolve/{version}/{path}` with `Range: bytes=N-` support.
#[derive(Clone)]
pub struct MockHub {
    addr: SocketAddr,
    state: Arc<Mutex<HubState>>,
    served: Arc<AtomicU64>,
    task: Arc<tokio::task::JoinHandle<()>>,
}

impl Drop for MockHub {
    fn drop(&mut self) {
        if Arc::strong_count(&self.task) == 1 {
            self.task.abort();
        }
    }
}

type Shared = (Arc<Mutex<HubState>>, Arc<AtomicU64>);

impl MockHub {
    pub async fn spawn() -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind mock hub");
        let addr = listener.local_addr().expect("local addr");
        let state = Arc::new(Mutex::new(HubState::default()));
        let served = Arc::new(AtomicU64::new(0));
        let app = Router::new()
            .fallback(serve)
            .with_state((state.clone(), served.clone()));
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Self {
            addr,
            state,
            served,
            task: Arc::new(task),
        }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn add_repo(&self, repo_id: &str, version: &str, files: &[(&str, &[u8])]) -> Manifest {
        let files: Vec<(String, Vec<u8>)> = files.iter().map(|(p, b)| (p.to_string(), b.to_vec())).collect();
        let manifest = manifest_of(&files);
        self.state
            .lock()
            .repos
            .insert((repo_id.to_owned(), version.to_owned()), files);
        manifest
    }

    /// Serves `bytes` for a file instead of its manifest content.
    pub fn corrupt(&self, repo_id: &str, version: &str, path: &str, bytes: &[u8]) {
        self.state
            .lock()
            .overrides
            .insert((repo_id.to_owned(), version.to_owned(), path.to_owned()), bytes.to_vec());
    }

    pub fn clear_corruption(&self) {
        self.state.lock().overrides.clear();
    }

    /// Body bytes sent for file downloads so far.
    pub fn bytes_served(&self) -> u64 {
        self.served.load(Ordering::SeqCst)
    }

    pub fn reset_counter(&self) {
        self.served.store(0, Ordering::SeqCst);
    }

    /// Request log as `"{path} {range}"` strings.
    pub fn requests(&self) -> Vec<String> {
        self.state.lock().requests.clone()
    }
}

pub fn manifest_of(files: &[(String, Vec<u8>)]) -> Manifest {
    Manifest {
        files: files
            .iter()
            .map(|(path, bytes)| ManifestEntry {
                path: path.clone(),
                size_bytes: bytes.len() as u64,
                sha256: sha256_hex(bytes),
            })
            .collect(),
    }
}

async fn serve(State((state, served)): State<Shared>, uri: Uri, headers: HeaderMap) -> Response {
    let path = uri.path().trim_start_matches('/').to_owned();
    let range = headers
        .get(header::RANGE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let mut st = state.lock();
    st.requests.push(format!("{path} {}", range.as_deref().unwrap_or("-")));

    if let Some((repo, version)) = path.split_once("/manifest/") {
        return match st.repos.get(&(repo.to_owned(), version.to_owned())) {
            Some(files) => axum::Json(manifest_of(files)).into_response(),
            None => StatusCode::NOT_FOUND.into_response(),
        };
    }
    let Some((repo, rest)) = path.split_once("/resolve/") else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let Some((version, file)) = rest.split_once('/') else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let key = (repo.to_owned(), version.to_owned(), file.to_owned());
    let body = match st.overrides.get(&key) {
        Some(b) => b.clone(),
        None => match st
            .repos
            .get(&(key.0.clone(), key.1.clone()))
            .and_then(|files| files.iter().find(|(p, _)| p == file))
        {
            Some((_, b)) => b.clone(),
            None => return StatusCode::NOT_FOUND.into_response(),
        },
    };
    drop(st);

    let start = range
        .as_deref()
        .and_then(|r| r.strip_prefix("bytes="))
        .and_then(|r| r.strip_suffix('-'))
        .and_then(|n| n.parse::<usize>().ok());
    match start {
        Some(s) if s < body.len() => {
            let part = body[s..].to_vec();
            served.fetch_add(part.len() as u64, Ordering::SeqCst);
            let content_range = format!("bytes {s}-{}/{}", body.len() - 1, body.len());
            (StatusCode::PARTIAL_CONTENT, [(header::CONTENT_RANGE, content_range)], part).into_response()
        }
        Some(_) => StatusCode::RANGE_NOT_SATISFIABLE.into_response(),
        None => {
            served.fetch_add(body.len() as u64, Ordering::SeqCst);
            body.into_response()
        }
    }
}

/// Writes files under `dir` and returns their paths.
pub fn write_files(dir: &Path, files: &[(&str, &[u8])]) -> Vec<PathBuf> {
    files
        .iter()
        .map(|(p, b)| {
            let path = dir.join(p);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).expect("create fixture dir");
            }
            std::fs::write(&path, b).expect("write fixture file");
            path
        })
        .collect()
}

/// Runtime timings short enough for tests.
pub fn fast_runtime_config() -> RuntimeConfig {
    RuntimeConfig {
        health_interval: std::time::Duration::from_millis(200),
        startup_timeout: std::time::Duration::from_secs(2),
        startup_poll: std::time::Duration::from_millis(20),
        drain_timeout: std::time::Duration::from_secs(10),
        ..RuntimeConfig::default()
    }
}

/// A sealed bundle that exists only as metadata; the stub ignores weights.
pub fn stub_bundle(model_id: &str, version: &str) -> WeightBundle {
    let bytes = format!("{model_id}@{version}");
    WeightBundle {
        model_id: model_id.to_owned(),
        version: version.to_owned(),
        root_dir: PathBuf::from("/var/lib/modelhub/blobs").join(model_id).join(version),
        manifest: vec![ManifestEntry {
            path: "weights.bin".into(),
            size_bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes.as_bytes()),
        }],
        total_bytes: bytes.len() as u64,
        sealed: true,
    }
}

/// One inference job against the 1×1 PNG fixture.
pub fn job(job_id: impl Into<String>, model_id: &str, prompt: &str) -> InferenceJob {
    InferenceJob {
        job_id: job_id.into(),
        model_id: model_id.to_owned(),
        version: None,
        prompt: prompt.to_owned(),
        image: ImagePayload::from_bytes(png_1x1(), Some("png")).expect("fixture decodes"),
        submitted_at: now_ms(),
        deadline_ms: None,
    }
}

/// Mock runtime, runtime manager and gateway wired together in memory.
pub struct Rig {
    pub mock: MockRuntime,
    pub egress: Arc<Egress>,
    pub runtime: Arc<RuntimeManager>,
    pub telemetry: Arc<Telemetry>,
    pub audit: Arc<AuditLog>,
    pub gateway: Arc<Gateway>,
}

impl Rig {
    pub fn new(config: GatewayConfig) -> Self {
        let mock = MockRuntime::new();
        let egress = Egress::new(false);
        let http = HttpClient::new(egress.clone());
        let runtime = Arc::new(RuntimeManager::new(Arc::new(mock.clone()), http.clone(), fast_runtime_config()));
        let telemetry = Arc::new(Telemetry::default());
        let audit = Arc::new(AuditLog::in_memory());
        let gateway = Arc::new(Gateway::new(runtime.clone(), http, telemetry.clone(), audit.clone(), config));
        Self {
            mock,
            egress,
            runtime,
            telemetry,
            audit,
            gateway,
        }
    }

    /// Builds the stub image for a version and returns how to launch it.
    pub async fn build(&self, model_id: &str, version: &str) -> LaunchSpec {
        let bundle = stub_bundle(model_id, version);
        let image = self.runtime.containerize(&bundle, "stub").await.expect("containerize");
        LaunchSpec {
            image_ref: image.image_ref,
            weights_dir: bundle.root_dir.to_string_lossy().into_owned(),
        }
    }

    /// Builds, starts `replicas` replicas and routes the model to `version`.
    pub async fn deploy(&self, model_id: &str, version: &str, replicas: usize) -> LaunchSpec {
        let spec = self.build(model_id, version).await;
        self.gateway.activate(model_id, version, spec.clone());
        self.gateway.scale_to(model_id, replicas).await.expect("replicas start");
        spec
    }
}

/// Hub settings rooted in `dir` with fast runtime timings; file-backed
/// stores when `persistent`.
pub fn hub_config(dir: &Path, persistent: bool) -> crate::HubConfig {
    crate::HubConfig {
        data_dir: persistent.then(|| dir.join("data")),
        blob_root: dir.join("blobs"),
        runtime: fast_runtime_config(),
        operator: "tester".into(),
        ..crate::HubConfig::default()
    }
}
