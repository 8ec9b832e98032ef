//! The authoritative set of registered models, their versions, provenance and
//! lifecycle status.
//!
//! State is event-sourced: every mutation is first appended to a
//! line-delimited JSON journal and then applied in memory, so replaying the
//! journal reproduces the live registry exactly.

mod journal;

use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::digest::{is_sha256_hex, sha256_hex};
use crate::time::{from_ms, now_ms};

pub use journal::{load_registry, JournalEntry, RegistryEvent, SNAPSHOT_FILE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    RemoteHub { repo_id: String },
    LocalPath { path: String },
}

impl ModelSource {
    pub fn hub(repo_id: impl Into<String>) -> Self {
        Self::RemoteHub { repo_id: repo_id.into() }
    }

    pub fn local(path: impl Into<String>) -> Self {
        Self::LocalPath { path: path.into() }
    }

    /// Canonical string form; the model id digest is taken over this.
    pub fn canonical(&self) -> String {
        match self {
            Self::RemoteHub { repo_id } => format!("hub:{repo_id}"),
            Self::LocalPath { path } => format!("local:{path}"),
        }
    }

    fn validate(&self) -> Result<(), RegistryError> {
        match self {
            Self::RemoteHub { repo_id } if repo_id.trim().is_empty() => {
                Err(RegistryError::InvalidSource("empty repo id".into()))
            }
            Self::LocalPath { path } if path.trim().is_empty() => {
                Err(RegistryError::InvalidSource("empty path".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelStatus {
    Registered,
    Acquiring,
    Containerized,
    Running,
    Stopped,
    Failed(String),
}

impl ModelStatus {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Registered => "Registered",
            Self::Acquiring => "Acquiring",
            Self::Containerized => "Containerized",
            Self::Running => "Running",
            Self::Stopped => "Stopped",
            Self::Failed(_) => "Failed",
        }
    }

    /// Parses a status name. `Failed` matches with an empty reason.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "Registered" => Self::Registered,
            "Acquiring" => Self::Acquiring,
            "Containerized" => Self::Containerized,
            "Running" => Self::Running,
            "Stopped" => Self::Stopped,
            "Failed" => Self::Failed(String::new()),
            _ => return None,
        })
    }

    /// Whether the weights digest must be present in this status.
    pub fn holds_weights(&self) -> bool {
        matches!(self, Self::Containerized | Self::Running | Self::Stopped)
    }

    pub fn can_transition_to(&self, to: &ModelStatus) -> bool {
        use ModelStatus::*;
        match (self, to) {
            (Failed(_), Failed(_)) => false,
            (_, Failed(_)) => true,
            (Registered, Acquiring)
            | (Acquiring, Containerized)
            | (Containerized, Running)
            | (Running, Stopped)
            | (Stopped, Running)
            | (Failed(_), Acquiring) => true,
            _ => false,
        }
    }
}

impl fmt::Display for ModelStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Failed(reason) => write!(f, "Failed({reason})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceMeta {
    pub acquired_from: String,
    #[serde(with = "chrono::serde::ts_milliseconds_option")]
    pub acquired_at: Option<DateTime<Utc>>,
    pub acquired_by: String,
    pub license_note: String,
    /// Audit entry ids touching this record. Only ever appended to.
    pub access_log_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub display_name: String,
    pub source: ModelSource,
    pub version: String,
    /// Set exactly while the status holds weights (Containerized and later).
    pub weights_digest: Option<String>,
    /// Empty until containerized.
    pub image_ref: String,
    pub status: ModelStatus,
    pub provenance: ProvenanceMeta,
    #[serde(with = "chrono::serde::ts_milliseconds")]
    pub created_at: DateTime<Utc>,
    #[serde(with = "chrono::serde::ts_milliseconds")]
    pub updated_at: DateTime<Utc>,
}

impl ModelRecord {
    pub fn key(&self) -> (&str, &str) {
        (&self.model_id, &self.version)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("model {model_id} version {version} is already registered")]
    DuplicateModelVersion { model_id: String, version: String },
    #[error("invalid source: {0}")]
    InvalidSource(String),
    #[error("version tag must be non-empty")]
    InvalidVersion,
    #[error("unknown model {model_id} version {version}")]
    UnknownModel { model_id: String, version: String },
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: String, to: String },
    #[error("containerized records require a 64-hex weights digest")]
    MissingDigest,
    #[error("corrupt journal at byte offset {offset}: {reason}")]
    CorruptJournal { offset: u64, reason: String },
    #[error("registry storage: {0}")]
    Io(#[from] io::Error),
}

/// Deterministic id: slugified display name plus the first 8 hex chars of
/// the source digest.
pub fn derive_model_id(display_name: &str, source: &ModelSource) -> String {
    let mut slug = String::new();
    let mut pending_dash = false;
    for ch in display_name.chars() {
        if ch.is_ascii_alphanumeric() {
            if pending_dash && !slug.is_empty() {
                slug.push('-');
            }
            pending_dash = false;
            slug.push(ch.to_ascii_lowercase());
        } else {
            pending_dash = true;
        }
    }
    if slug.is_empty() {
        slug.push_str("model");
    }
    let digest = sha256_hex(source.canonical().as_bytes());
    format!("{slug}-{}", &digest[..8])
}

/// Inert registry entries for the five VLMs the hub was evaluated with.
/// Registering them never triggers a download.
pub fn seed_fixtures() -> Vec<(ModelSource, &'static str, &'static str)> {
    vec![
        (ModelSource::hub("google/medgemma-4b-it"), "Google-MedGemma3-4B", "1.0"),
        (ModelSource::hub("Qwen/Qwen2-VL-7B-Instruct"), "Qwen2-VL-7B-Instruct", "1.0"),
        (ModelSource::hub("Qwen/Qwen2.5-VL-7B-Instruct"), "Qwen2.5-VL-7B-Instruct", "1.0"),
        (ModelSource::hub("llava-hf/llava-1.5-7b-hf"), "LLaVA-1.5-7B", "1.0"),
        (ModelSource::hub("llava-hf/llava-1.5-13b-hf"), "LLaVA-1.5-13B", "1.0"),
    ]
}

/// Storage locations for a file-backed registry.
#[derive(Debug, Clone)]
pub struct RegistryPaths {
    pub journal: PathBuf,
    pub snapshot: PathBuf,
}

impl RegistryPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            journal: dir.join("registry.journal"),
            snapshot: dir.join(SNAPSHOT_FILE),
        }
    }
}

/// Snapshot every this many journal entries.
const SNAPSHOT_INTERVAL: u64 = 256;

pub struct Registry {
    records: Vec<ModelRecord>,
    next_seq: u64,
    sink: Box<dyn Write + Send + Sync>,
    snapshot_path: Option<PathBuf>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("records", &self.records.len())
            .field("next_seq", &self.next_seq)
            .finish()
    }
}

impl PartialEq for Registry {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.next_seq == other.next_seq
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Registry {
    /// A registry whose journal is discarded.
    pub fn in_memory() -> Self {
        Self::with_sink(Box::new(io::sink()))
    }

    /// A registry that appends its journal to `sink`.
    pub fn with_sink(sink: Box<dyn Write + Send + Sync>) -> Self {
        Self {
            records: Vec::new(),
            next_seq: 0,
            sink,
            snapshot_path: None,
        }
    }

    /// Opens (or creates) a file-backed registry, restoring from the latest
    /// snapshot and replaying the journal tail.
    pub fn open(paths: &RegistryPaths) -> Result<Self, RegistryError> {
        if let Some(parent) = paths.journal.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut registry = journal::restore(paths)?;
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&paths.journal)?;
        registry.sink = Box::new(file);
        registry.snapshot_path = Some(paths.snapshot.clone());
        Ok(registry)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ModelRecord] {
        &self.records
    }

    /// Sequence number the next journal entry will carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn get(&self, model_id: &str, version: &str) -> Option<&ModelRecord> {
        self.records
            .iter()
            .find(|r| r.model_id == model_id && r.version == version)
    }

    pub fn versions_of<'a>(&'a self, model_id: &'a str) -> impl Iterator<Item = &'a ModelRecord> {
        self.records.iter().filter(move |r| r.model_id == model_id)
    }

    pub fn contains_model(&self, model_id: &str) -> bool {
        self.records.iter().any(|r| r.model_id == model_id)
    }

    /// Snapshot ordered by creation time; `filter` matches the status name.
    pub fn list_models(&self, filter: Option<&ModelStatus>) -> Vec<ModelRecord> {
        let mut out: Vec<ModelRecord> = self
            .records
            .iter()
            .filter(|r| filter.is_none_or(|s| s.name() == r.status.name()))
            .cloned()
            .collect();
        out.sort_by_key(|r| r.created_at);
        out
    }

    pub fn register_model(
        &mut self,
        source: ModelSource,
        display_name: &str,
        version: &str,
        operator: &str,
    ) -> Result<ModelRecord, RegistryError> {
        if version.trim().is_empty() {
            return Err(RegistryError::InvalidVersion);
        }
        source.validate()?;
        let model_id = derive_model_id(display_name, &source);
        if self.get(&model_id, version).is_some() {
            return Err(RegistryError::DuplicateModelVersion {
                model_id,
                version: version.to_owned(),
            });
        }
        let ts = now_ms();
        let record = ModelRecord {
            model_id,
            display_name: display_name.to_owned(),
            version: version.to_owned(),
            weights_digest: None,
            image_ref: String::new(),
            status: ModelStatus::Registered,
            provenance: ProvenanceMeta {
                acquired_from: source.canonical(),
                acquired_at: None,
                acquired_by: operator.to_owned(),
                license_note: String::new(),
                access_log_ids: Vec::new(),
            },
            source,
            created_at: from_ms(ts),
            updated_at: from_ms(ts),
        };
        self.commit(ts, RegistryEvent::Registered(record.clone()))?;
        Ok(record)
    }

    pub fn transition_status(
        &mut self,
        model_id: &str,
        version: &str,
        new_status: ModelStatus,
    ) -> Result<ModelRecord, RegistryError> {
        if new_status == ModelStatus::Containerized {
            return Err(RegistryError::MissingDigest);
        }
        self.transition(model_id, version, new_status, None, None)
    }

    /// Moves an `Acquiring` record to `Containerized`, attaching the weights
    /// digest and the image that serves it.
    pub fn mark_containerized(
        &mut self,
        model_id: &str,
        version: &str,
        weights_digest: &str,
        image_ref: &str,
    ) -> Result<ModelRecord, RegistryError> {
        self.transition(
            model_id,
            version,
            ModelStatus::Containerized,
            Some(weights_digest.to_owned()),
            Some(image_ref.to_owned()),
        )
    }

    fn transition(
        &mut self,
        model_id: &str,
        version: &str,
        to: ModelStatus,
        weights_digest: Option<String>,
        image_ref: Option<String>,
    ) -> Result<ModelRecord, RegistryError> {
        let event = RegistryEvent::Transitioned {
            model_id: model_id.to_owned(),
            version: version.to_owned(),
            to,
            weights_digest,
            image_ref,
        };
        self.commit(now_ms(), event)?;
        Ok(self.get(model_id, version).cloned().expect("record present"))
    }

    /// Appends an audit id to the record's access log, optionally stamping
    /// acquisition provenance.
    pub fn record_access(
        &mut self,
        model_id: &str,
        version: &str,
        audit_id: &str,
        acquired: Option<(String, String)>,
    ) -> Result<ModelRecord, RegistryError> {
        let ts = now_ms();
        let event = RegistryEvent::AccessLogged {
            model_id: model_id.to_owned(),
            version: version.to_owned(),
            audit_id: audit_id.to_owned(),
            acquired_from: acquired.as_ref().map(|a| a.0.clone()),
            acquired_by: acquired.map(|a| a.1),
        };
        self.commit(ts, event)?;
        Ok(self.get(model_id, version).cloned().expect("record present"))
    }

    /// Writes the full state to the snapshot file (temp file + rename).
    pub fn write_snapshot(&self) -> Result<(), RegistryError> {
        if let Some(path) = &self.snapshot_path {
            journal::write_snapshot(path, self)?;
        }
        Ok(())
    }

    fn commit(&mut self, ts_ms: i64, event: RegistryEvent) -> Result<(), RegistryError> {
        self.check(&event)?;
        let entry = JournalEntry {
            seq: self.next_seq,
            ts_ms,
            event,
        };
        let mut line = serde_json::to_vec(&entry).map_err(io::Error::other)?;
        line.push(b'\n');
        self.sink.write_all(&line)?;
        self.sink.flush()?;
        self.apply(entry)?;
        if self.next_seq % SNAPSHOT_INTERVAL == 0 {
            self.write_snapshot()?;
        }
        Ok(())
    }

    /// Validates an event against the current state without applying it.
    fn check(&self, event: &RegistryEvent) -> Result<(), RegistryError> {
        match event {
            RegistryEvent::Registered(record) => {
                if record.version.trim().is_empty() {
                    return Err(RegistryError::InvalidVersion);
                }
                record.source.validate()?;
                if self.get(&record.model_id, &record.version).is_some() {
                    return Err(RegistryError::DuplicateModelVersion {
                        model_id: record.model_id.clone(),
                        version: record.version.clone(),
                    });
                }
                if record.status != ModelStatus::Registered {
                    return Err(RegistryError::IllegalTransition {
                        from: "(none)".into(),
                        to: record.status.to_string(),
                    });
                }
                Ok(())
            }
            RegistryEvent::Transitioned {
                model_id,
                version,
                to,
                weights_digest,
                ..
            } => {
                let current = self.require(model_id, version)?;
                if !current.status.can_transition_to(to) {
                    return Err(RegistryError::IllegalTransition {
                        from: current.status.to_string(),
                        to: to.to_string(),
                    });
                }
                if *to == ModelStatus::Containerized
                    && !weights_digest.as_deref().is_some_and(is_sha256_hex)
                {
                    return Err(RegistryError::MissingDigest);
                }
                Ok(())
            }
            RegistryEvent::AccessLogged { model_id, version, .. } => {
                self.require(model_id, version).map(|_| ())
            }
        }
    }

    fn require(&self, model_id: &str, version: &str) -> Result<&ModelRecord, RegistryError> {
        self.get(model_id, version)
            .ok_or_else(|| RegistryError::UnknownModel {
                model_id: model_id.to_owned(),
                version: version.to_owned(),
            })
    }

    /// Applies a validated entry. Shared by live writes and replay.
    fn apply(&mut self, entry: JournalEntry) -> Result<(), RegistryError> {
        let ts = from_ms(entry.ts_ms);
        match entry.event {
            RegistryEvent::Registered(record) => self.records.push(record),
            RegistryEvent::Transitioned {
                model_id,
                version,
                to,
                weights_digest,
                image_ref,
            } => {
                let record = self
                    .records
                    .iter_mut()
                    .find(|r| r.model_id == model_id && r.version == version)
                    .expect("checked");
                match &to {
                    ModelStatus::Acquiring => {
                        record.weights_digest = None;
                        record.image_ref.clear();
                    }
                    ModelStatus::Containerized => {
                        record.weights_digest = weights_digest;
                        record.image_ref = image_ref.unwrap_or_default();
                    }
                    _ => {}
                }
                record.status = to;
                record.updated_at = ts;
            }
            RegistryEvent::AccessLogged {
                model_id,
                version,
                audit_id,
                acquired_from,
                acquired_by,
            } => {
                let record = self
                    .records
                    .iter_mut()
                    .find(|r| r.model_id == model_id && r.version == version)
                    .expect("checked");
                record.provenance.access_log_ids.push(audit_id);
                if let Some(from) = acquired_from {
                    record.provenance.acquired_from = from;
                    record.provenance.acquired_at = Some(ts);
                }
                if let Some(by) = acquired_by {
                    record.provenance.acquired_by = by;
                }
                record.updated_at = ts;
            }
        }
        self.next_seq = entry.seq + 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registered(reg: &mut Registry) -> ModelRecord {
        reg.register_model(ModelSource::hub("acme/tiny-echo"), "Tiny Echo", "1.0", "op")
            .unwrap()
    }

    #[test]
    fn register_derives_slug_plus_digest() {
        let mut reg = Registry::in_memory();
        let rec = registered(&mut reg);
        assert_eq!(rec.status, ModelStatus::Registered);
        let (slug, digest) = rec.model_id.split_at("tiny-echo-".len());
        assert_eq!(slug, "tiny-echo-");
        assert_eq!(digest.len(), 8);
        assert!(digest.bytes().all(|b| b.is_ascii_hexdigit()));
        // `printf 'hub:acme/tiny-echo' | sha256sum | cut -c1-8`
        assert_eq!(digest, &sha256_hex(b"hub:acme/tiny-echo")[..8]);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut reg = Registry::in_memory();
        registered(&mut reg);
        let err = reg
            .register_model(ModelSource::hub("acme/tiny-echo"), "Tiny Echo", "1.0", "op")
            .unwrap_err();
        assert!(matches!(err, RegistryError::DuplicateModelVersion { .. }));
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn empty_sources_and_versions_rejected() {
        let mut reg = Registry::in_memory();
        assert!(matches!(
            reg.register_model(ModelSource::local(""), "X", "1", "op"),
            Err(RegistryError::InvalidSource(_))
        ));
        assert!(matches!(
            reg.register_model(ModelSource::hub("  "), "X", "1", "op"),
            Err(RegistryError::InvalidSource(_))
        ));
        assert!(matches!(
            reg.register_model(ModelSource::hub("a/b"), "X", "", "op"),
            Err(RegistryError::InvalidVersion)
        ));
    }

    #[test]
    fn list_filters_and_orders() {
        let mut reg = Registry::in_memory();
        assert!(reg.list_models(None).is_empty());
        for (source, name, version) in seed_fixtures() {
            reg.register_model(source, name, version, "seed").unwrap();
        }
        let all = reg.list_models(None);
        assert_eq!(all.len(), 5);
        assert!(all.windows(2).all(|w| w[0].created_at <= w[1].created_at));
        assert!(reg.list_models(Some(&ModelStatus::Running)).is_empty());
        assert_eq!(reg.list_models(Some(&ModelStatus::Registered)).len(), 5);
    }

    #[test]
    fn legal_and_illegal_transitions() {
        let mut reg = Registry::in_memory();
        let rec = registered(&mut reg);
        let (id, v) = (rec.model_id.as_str(), "1.0");
        let err = reg.transition_status(id, v, ModelStatus::Running).unwrap_err();
        assert!(matches!(err, RegistryError::IllegalTransition { .. }));
        reg.transition_status(id, v, ModelStatus::Acquiring).unwrap();
        reg.transition_status(id, v, ModelStatus::Failed("x".into()))
            .unwrap();
        let back = reg.transition_status(id, v, ModelStatus::Acquiring).unwrap();
        assert_eq!(back.status, ModelStatus::Acquiring);
        assert!(matches!(
            reg.transition_status("nope", v, ModelStatus::Acquiring),
            Err(RegistryError::UnknownModel { .. })
        ));
    }

    #[test]
    fn digest_present_exactly_when_holding_weights() {
        let mut reg = Registry::in_memory();
        let rec = registered(&mut reg);
        let id = rec.model_id.clone();
        reg.transition_status(&id, "1.0", ModelStatus::Acquiring).unwrap();
        assert!(matches!(
            reg.transition_status(&id, "1.0", ModelStatus::Containerized),
            Err(RegistryError::MissingDigest)
        ));
        assert!(matches!(
            reg.mark_containerized(&id, "1.0", "abc", "img"),
            Err(RegistryError::MissingDigest)
        ));
        let digest = sha256_hex(b"weights");
        let c = reg.mark_containerized(&id, "1.0", &digest, "modelhub/stub:1234").unwrap();
        assert_eq!(c.weights_digest.as_deref(), Some(digest.as_str()));
        let r = reg.transition_status(&id, "1.0", ModelStatus::Running).unwrap();
        assert!(r.weights_digest.is_some());
        let f = reg.transition_status(&id, "1.0", ModelStatus::Failed("oom".into())).unwrap();
        let retry = reg.transition_status(&id, "1.0", ModelStatus::Acquiring).unwrap();
        assert!(f.weights_digest.is_some());
        assert!(retry.weights_digest.is_none());
        assert!(retry.image_ref.is_empty());
    }

    #[test]
    fn access_log_is_append_only() {
        let mut reg = Registry::in_memory();
        let rec = registered(&mut reg);
        reg.record_access(&rec.model_id, "1.0", "a1", None).unwrap();
        let after = reg
            .record_access(&rec.model_id, "1.0", "a2", Some(("http://hub".into(), "alice".into())))
            .unwrap();
        assert_eq!(after.provenance.access_log_ids, vec!["a1", "a2"]);
        assert_eq!(after.provenance.acquired_by, "alice");
        assert!(after.provenance.acquired_at.is_some());
    }
}
