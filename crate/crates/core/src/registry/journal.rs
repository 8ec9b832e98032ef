use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelRecord, ModelStatus, Registry, RegistryError, RegistryPaths};

pub const SNAPSHOT_FILE: &str = "registry.snapshot.json";

/// One journal line: `{seq, ts_ms, event, payload}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub ts_ms: i64,
    #[serde(flatten)]
    pub event: RegistryEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload")]
pub enum RegistryEvent {
    Registered(ModelRecord),
    Transitioned {
        model_id: String,
        version: String,
        to: ModelStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights_digest: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_ref: Option<String>,
    },
    AccessLogged {
        model_id: String,
        version: String,
        audit_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        acquired_from: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        acquired_by: Option<String>,
    },
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    next_seq: u64,
    records: Vec<ModelRecord>,
}

/// Rebuilds a registry by replaying a journal byte stream.
///
/// Every entry must be newline-terminated, parse, carry the next sequence
/// number and describe a legal state change; the first violation yields
/// `CorruptJournal` at the byte offset where that entry starts and no
/// partial registry is returned.
pub fn load_registry(journal: &[u8]) -> Result<Registry, RegistryError> {
    replay_into(Registry::in_memory(), journal)
}

fn replay_into(mut registry: Registry, journal: &[u8]) -> Result<Registry, RegistryError> {
    let skip_below = registry.next_seq;
    let mut expected_seq = 0u64;
    let mut offset = 0usize;
    while offset < journal.len() {
        let rest = &journal[offset..];
        let corrupt = |reason: String| RegistryError::CorruptJournal {
            offset: offset as u64,
            reason,
        };
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return Err(corrupt("truncated entry (no terminating newline)".into()));
        };
        let entry: JournalEntry = serde_json::from_slice(&rest[..end])
            .map_err(|e| corrupt(format!("malformed entry: {e}")))?;
        if entry.seq != expected_seq {
            return Err(corrupt(format!(
                "expected seq {expected_seq}, found {}",
                entry.seq
            )));
        }
        expected_seq += 1;
        if entry.seq >= skip_below {
            registry
                .check(&entry.event)
                .map_err(|e| corrupt(format!("illegal event: {e}")))?;
            registry.apply(entry)?;
        }
        offset += end + 1;
    }
    if expected_seq < skip_below {
        return Err(RegistryError::CorruptJournal {
            offset: journal.len() as u64,
            reason: format!("journal ends at seq {expected_seq}, snapshot covers {skip_below}"),
        });
    }
    Ok(registry)
}

pub(super) fn restore(paths: &RegistryPaths) -> Result<Registry, RegistryError> {
    let mut base = Registry::in_memory();
    match fs::read(&paths.snapshot) {
        Ok(bytes) => {
            let snap: Snapshot = serde_json::from_slice(&bytes)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            base.records = snap.records;
            base.next_seq = snap.next_seq;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }
    let journal = match fs::read(&paths.journal) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    replay_into(base, &journal)
}

pub(super) fn write_snapshot(path: &Path, registry: &Registry) -> io::Result<()> {
    let snap = Snapshot {
        next_seq: registry.next_seq,
        records: registry.records.clone(),
    };
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&snap)?)?;
    fs::rename(tmp, path)
}
