//! The controlled external channel: the only path through which model
//! weights enter the hub.
//!
//! Bundles live at `{blob_root}/{model_id}/{version}/` with the manifest in
//! `MANIFEST.json`. Files are fetched into `.partial/`, verified against
//! their manifest digest and only then renamed into place; `SEALED` is
//! written last. A `.lock` file keeps one acquisition per model version.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use futures::StreamExt;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;

use crate::digest::{sha256_file, sha256_hex};
use crate::net::HttpClient;
use crate::registry::{ModelRecord, ModelSource, ModelStatus};

pub const MANIFEST_FILE: &str = "MANIFEST.json";
pub const SEALED_FILE: &str = "SEALED";
const PARTIAL_DIR: &str = ".partial";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub size_bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightBundle {
    pub model_id: String,
    pub version: String,
    pub root_dir: PathBuf,
    pub manifest: Vec<ManifestEntry>,
    pub total_bytes: u64,
    pub sealed: bool,
}

impl WeightBundle {
    /// Digest identifying the whole bundle: SHA-256 over the manifest
    /// entries sorted by path, one `path\tsize\tsha256\n` line each.
    pub fn weights_digest(&self) -> String {
        let mut entries: Vec<&ManifestEntry> = self.manifest.iter().collect();
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let mut text = String::new();
        for e in entries {
            text.push_str(&format!("{}\t{}\t{}\n", e.path, e.size_bytes, e.sha256));
        }
        sha256_hex(text.as_bytes())
    }
}

/// True iff every manifest entry exists on disk with the recorded digest.
/// Pure: reads files, changes nothing.
pub fn verify_bundle(bundle: &WeightBundle) -> bool {
    bundle.manifest.iter().all(|e| {
        matches!(
            sha256_file(&bundle.root_dir.join(&e.path)),
            Ok((digest, len)) if digest == e.sha256 && len == e.size_bytes
        )
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProgressState {
    Pending,
    Fetching,
    Verifying,
    Sealed,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownloadProgress {
    pub bytes_done: u64,
    pub bytes_total: u64,
    pub files_done: u64,
    pub state: ProgressState,
}

impl Default for DownloadProgress {
    fn default() -> Self {
        Self {
            bytes_done: 0,
            bytes_total: 0,
            files_done: 0,
            state: ProgressState::Pending,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AcquisitionError {
    #[error("network unreachable: {0}")]
    NetworkUnreachable(String),
    #[error("digest mismatch for {file}")]
    DigestMismatch { file: String },
    #[error("source missing: {0}")]
    SourceMissing(String),
    #[error("record must be Acquiring, found {0}")]
    NotAcquiring(String),
    #[error("another acquisition of {0} is in progress")]
    Busy(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("blob store: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct AcquisitionConfig {
    pub allow_outbound: bool,
    pub blob_root: PathBuf,
    pub hub_base_url: String,
}

/// A sealed bundle plus how many bytes this attempt transferred.
#[derive(Debug, Clone)]
pub struct Acquired {
    pub bundle: WeightBundle,
    pub bytes_fetched: u64,
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn take(path: PathBuf, key: &str) -> Result<Self, AcquisitionError> {
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(AcquisitionError::Busy(key.to_owned())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn safe_segment(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-') { c } else { '_' })
        .collect::<String>()
        .trim_start_matches('.')
        .to_owned()
}

fn check_relative(path: &str) -> Result<(), AcquisitionError> {
    let p = Path::new(path);
    let ok = !path.is_empty()
        && p.components().all(|c| matches!(c, Component::Normal(_)))
        && !p.starts_with(PARTIAL_DIR)
        && path != MANIFEST_FILE
        && path != SEALED_FILE
        && path != LOCK_FILE;
    if ok {
        Ok(())
    } else {
        Err(AcquisitionError::InvalidManifest(format!("unsafe path {path:?}")))
    }
}

async fn hash_file(path: PathBuf) -> io::Result<(String, u64)> {
    tokio::task::spawn_blocking(move || sha256_file(&path))
        .await
        .map_err(io::Error::other)?
}

async fn file_matches(path: &Path, entry: &ManifestEntry) -> bool {
    match tokio::fs::metadata(path).await {
        Ok(m) if m.is_file() && m.len() == entry.size_bytes => {
            matches!(hash_file(path.to_owned()).await, Ok((d, _)) if d == entry.sha256)
        }
        _ => false,
    }
}

pub struct Acquirer {
    config: AcquisitionConfig,
    http: HttpClient,
    progress: Mutex<HashMap<(String, String), DownloadProgress>>,
}

impl std::fmt::Debug for Acquirer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Acquirer").field("blob_root", &self.config.blob_root).finish()
    }
}

impl Acquirer {
    pub fn new(config: AcquisitionConfig, http: HttpClient) -> Self {
        Self {
            config,
            http,
            progress: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &AcquisitionConfig {
        &self.config
    }

    pub fn bundle_dir(&self, model_id: &str, version: &str) -> PathBuf {
        self.config
            .blob_root
            .join(safe_segment(model_id))
            .join(safe_segment(version))
    }

    pub fn progress(&self, model_id: &str, version: &str) -> Option<DownloadProgress> {
        self.progress
            .lock()
            .get(&(model_id.to_owned(), version.to_owned()))
            .cloned()
    }

    fn update(&self, record: &ModelRecord, f: impl FnOnce(&mut DownloadProgress)) {
        let mut map = self.progress.lock();
        f(map.entry((record.model_id.clone(), record.version.clone())).or_default());
    }

    /// Reads a previously sealed bundle from the blob store.
    pub fn load_bundle(&self, model_id: &str, version: &str) -> Option<WeightBundle> {
        let dir = self.bundle_dir(model_id, version);
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE)).ok()?).ok()?;
        Some(WeightBundle {
            model_id: model_id.to_owned(),
            version: version.to_owned(),
            total_bytes: manifest.files.iter().map(|e| e.size_bytes).sum(),
            manifest: manifest.files,
            sealed: dir.join(SEALED_FILE).is_file(),
            root_dir: dir,
        })
    }

    /// Fetches or imports the record's weights and seals them in the blob
    /// store. Files already present and valid are not fetched again.
    pub async fn acquire(&self, record: &ModelRecord) -> Result<Acquired, AcquisitionError> {
        if record.status != ModelStatus::Acquiring {
            return Err(AcquisitionError::NotAcquiring(record.status.to_string()));
        }
        let result = self.run(record).await;
        if let Err(e) = &result {
            let reason = e.to_string();
            self.update(record, |p| p.state = ProgressState::Failed(reason));
        }
        result
    }

    /// Continues an interrupted acquisition: only missing or invalid files
    /// are fetched, and the sealed result is identical to a fresh acquire.
    pub async fn resume(&self, _previous: &DownloadProgress, record: &ModelRecord) -> Result<Acquired, AcquisitionError> {
        self.acquire(record).await
    }

    async fn run(&self, record: &ModelRecord) -> Result<Acquired, AcquisitionError> {
        let dir = self.bundle_dir(&record.model_id, &record.version);
        tokio::fs::create_dir_all(&dir).await?;
        let key = format!("{}@{}", record.model_id, record.version);
        let _lock = LockGuard::take(dir.join(LOCK_FILE), &key)?;

        if let Some(existing) = self.load_bundle(&record.model_id, &record.version) {
            if existing.sealed && verify_bundle(&existing) {
                self.update(record, |p| {
                    *p = DownloadProgress {
                        bytes_done: existing.total_bytes,
                        bytes_total: existing.total_bytes,
                        files_done: existing.manifest.len() as u64,
                        state: ProgressState::Sealed,
                    }
                });
                return Ok(Acquired {
                    bundle: existing,
                    bytes_fetched: 0,
                });
            }
            let _ = tokio::fs::remove_file(dir.join(SEALED_FILE)).await;
        }

        let manifest = self.fetch_manifest(record).await?;
        for e in &manifest.files {
            check_relative(&e.path)?;
        }
        let total: u64 = manifest.files.iter().map(|e| e.size_bytes).sum();
        self.update(record, |p| {
            *p = DownloadProgress {
                bytes_total: total,
                state: ProgressState::Fetching,
                ..Default::default()
            }
        });

        let mut fetched = 0u64;
        let mut done = 0u64;
        for entry in &manifest.files {
            let cap = done + entry.size_bytes;
            let target = dir.join(&entry.path);
            if !file_matches(&target, entry).await {
                let partial = dir.join(PARTIAL_DIR).join(&entry.path);
                if let Some(parent) = partial.parent() {
                    tokio::fs::create_dir_all(parent).await?;
                }
                fetched += self.fetch_file(record, entry, &partial, cap).await?;
                if let Some(parent) = target.parent() {
                    tokio::fs::create_dir_all(parent).await?;
                }
                tokio::fs::rename(&partial, &target).await?;
            }
            done = cap;
            self.update(record, |p| {
                p.bytes_done = p.bytes_done.max(done);
                p.files_done += 1;
            });
        }

        self.update(record, |p| p.state = ProgressState::Verifying);
        let bundle = WeightBundle {
            model_id: record.model_id.clone(),
            version: record.version.clone(),
            root_dir: dir.clone(),
            total_bytes: total,
            manifest: manifest.files.clone(),
            sealed: false,
        };
        if let Some(bad) = bundle
            .manifest
            .iter()
            .find(|e| !matches!(sha256_file(&dir.join(&e.path)), Ok((d, _)) if d == e.sha256))
        {
            return Err(AcquisitionError::DigestMismatch { file: bad.path.clone() });
        }
        tokio::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest).map_err(io::Error::other)?)
            .await?;
        let _ = tokio::fs::remove_dir_all(dir.join(PARTIAL_DIR)).await;
        tokio::fs::write(dir.join(SEALED_FILE), bundle.weights_digest()).await?;
        self.update(record, |p| p.state = ProgressState::Sealed);
        Ok(Acquired {
            bundle: WeightBundle { sealed: true, ..bundle },
            bytes_fetched: fetched,
        })
    }

    async fn fetch_manifest(&self, record: &ModelRecord) -> Result<Manifest, AcquisitionError> {
        match &record.source {
            ModelSource::RemoteHub { repo_id } => {
                let url = format!(
                    "{}/{repo_id}/manifest/{}",
                    self.config.hub_base_url.trim_end_matches('/'),
                    record.version
                );
                let resp = self
                    .remote_get(&url)?
                    .send()
                    .await
                    .map_err(|e| AcquisitionError::NetworkUnreachable(e.to_string()))?;
                if resp.status() == reqwest::StatusCode::NOT_FOUND {
                    return Err(AcquisitionError::SourceMissing(format!("{repo_id}@{}", record.version)));
                }
                let resp = resp
                    .error_for_status()
                    .map_err(|e| AcquisitionError::NetworkUnreachable(e.to_string()))?;
                resp.json::<Manifest>()
                    .await
                    .map_err(|e| AcquisitionError::InvalidManifest(e.to_string()))
            }
            ModelSource::LocalPath { path } => {
                let root = PathBuf::from(path);
                if !root.is_dir() {
                    return Err(AcquisitionError::SourceMissing(path.clone()));
                }
                match fs::read(root.join(MANIFEST_FILE)) {
                    Ok(bytes) => serde_json::from_slice(&bytes)
                        .map_err(|e| AcquisitionError::InvalidManifest(e.to_string())),
                    Err(e) if e.kind() == io::ErrorKind::NotFound => {
                        tokio::task::spawn_blocking(move || scan_local(&root))
                            .await
                            .map_err(io::Error::other)?
                            .map_err(Into::into)
                    }
                    Err(e) => Err(e.into()),
                }
            }
        }
    }

    fn remote_get(&self, url: &str) -> Result<reqwest::RequestBuilder, AcquisitionError> {
        if !self.config.allow_outbound {
            return Err(AcquisitionError::NetworkUnreachable(
                "outbound access is disabled by policy".into(),
            ));
        }
        self.http
            .get(url)
            .map_err(|e| AcquisitionError::NetworkUnreachable(e.to_string()))
    }

    /// Brings `partial` to the entry's content and returns the bytes
    /// transferred. A partial remote file is continued with a range request;
    /// if the result fails verification the file is fetched again in full.
    async fn fetch_file(
        &self,
        record: &ModelRecord,
        entry: &ManifestEntry,
        partial: &Path,
        cap: u64,
    ) -> Result<u64, AcquisitionError> {
        match &record.source {
            ModelSource::LocalPath { path } => {
                let src = Path::new(path).join(&entry.path);
                if !src.is_file() {
                    return Err(AcquisitionError::SourceMissing(src.display().to_string()));
                }
                let copied = tokio::fs::copy(&src, partial).await?;
                if !file_matches(partial, entry).await {
                    let _ = tokio::fs::remove_file(partial).await;
                    return Err(AcquisitionError::DigestMismatch { file: entry.path.clone() });
                }
                Ok(copied)
            }
            ModelSource::RemoteHub { repo_id } => {
                let url = format!(
                    "{}/{repo_id}/resolve/{}/{}",
                    self.config.hub_base_url.trim_end_matches('/'),
                    record.version,
                    entry.path
                );
                let existing = tokio::fs::metadata(partial).await.map(|m| m.len()).unwrap_or(0);
                let mut fetched = 0;
                if existing > 0 && existing < entry.size_bytes {
                    fetched += self.download(record, &url, partial, existing, cap).await?;
                }
                if file_matches(partial, entry).await {
                    return Ok(fetched);
                }
                fetched += self.download(record, &url, partial, 0, cap).await?;
                if file_matches(partial, entry).await {
                    Ok(fetched)
                } else {
                    Err(AcquisitionError::DigestMismatch { file: entry.path.clone() })
                }
            }
        }
    }

    /// Streams `url` into `partial`; progress is capped at `cap` so a refetch
    /// never reports more than the file's share of the total.
    async fn download(
        &self,
        record: &ModelRecord,
        url: &str,
        partial: &Path,
        offset: u64,
        cap: u64,
    ) -> Result<u64, AcquisitionError> {
        let mut req = self.remote_get(url)?;
        if offset > 0 {
            req = req.header(reqwest::header::RANGE, format!("bytes={offset}-"));
        }
        let resp = req
            .send()
            .await
            .map_err(|e| AcquisitionError::NetworkUnreachable(e.to_string()))?;
        let status = resp.status();
        if status == reqwest::StatusCode::NOT_FOUND {
            return Err(AcquisitionError::SourceMissing(url.to_owned()));
        }
        if !status.is_success() {
            return Err(AcquisitionError::NetworkUnreachable(format!("{url}: {status}")));
        }
        let append = offset > 0 && status == reqwest::StatusCode::PARTIAL_CONTENT;
        let mut file = tokio::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(partial)
            .await?;
        let mut stream = resp.bytes_stream();
        let mut n = 0u64;
        while let Some(chunk) = stream.next().await {
            let chunk = chunk.map_err(|e| AcquisitionError::NetworkUnreachable(e.to_string()))?;
            file.write_all(&chunk).await?;
            n += chunk.len() as u64;
            self.update(record, |p| p.bytes_done = (p.bytes_done + chunk.len() as u64).min(cap).max(p.bytes_done));
        }
        file.flush().await?;
        Ok(n)
    }
}

/// Builds a manifest by hashing every regular file under `root`.
pub fn scan_local(root: &Path) -> io::Result<Manifest> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.is_file() {
                let rel = path
                    .strip_prefix(root)
                    .map_err(io::Error::other)?
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel == MANIFEST_FILE {
                    continue;
                }
                let (sha256, size_bytes) = sha256_file(&path)?;
                files.push(ManifestEntry {
                    path: rel,
                    size_bytes,
                    sha256,
                });
            }
        }
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest { files })
}
