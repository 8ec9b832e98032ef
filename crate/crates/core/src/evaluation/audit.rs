//! Append-only, hash-chained audit log.
//!
//! Each entry stores its canonical JSON payload, the payload's SHA-256, the
//! previous entry's hash and its own hash:
//!
//! ```text
//! entry_hash = SHA-256(prev_hash ‖ seq ‖ ts_ms ‖ kind ‖ payload_digest)
//! ```
//!
//! where `prev_hash`, `kind` and `payload_digest` contribute their ASCII
//! bytes and `seq`/`ts_ms` their 8-byte big-endian encodings. The genesis
//! entry chains from 64 zero hex characters. Entries are persisted one per
//! line; verification re-serializes each parsed line and requires it to
//! match the stored bytes exactly, so any byte-level edit is detected.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::digest::sha256_hex;
use crate::time::now_ms;

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuditKind {
    Inference,
    Registration,
    Acquisition,
    Swap,
    Score,
    Export,
}

impl AuditKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Inference => "Inference",
            Self::Registration => "Registration",
            Self::Acquisition => "Acquisition",
            Self::Swap => "Swap",
            Self::Score => "Score",
            Self::Export => "Export",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub ts_ms: i64,
    pub kind: AuditKind,
    pub payload: Value,
    pub payload_digest: String,
    pub prev_hash: String,
    pub entry_hash: String,
}

impl AuditEntry {
    /// Stable identifier other records use to reference this entry.
    pub fn id(&self) -> String {
        format!("audit-{}", self.seq)
    }
}

pub fn canonical_payload(payload: &Value) -> Vec<u8> {
    serde_json::to_vec(payload).expect("json values always serialize")
}

pub fn chain_hash(prev_hash: &str, seq: u64, ts_ms: i64, kind: AuditKind, payload_digest: &str) -> String {
    let mut h = Sha256::new();
    h.update(prev_hash.as_bytes());
    h.update(seq.to_be_bytes());
    h.update(ts_ms.to_be_bytes());
    h.update(kind.as_str().as_bytes());
    h.update(payload_digest.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict")]
pub enum AuditVerdict {
    Ok { entries: u64 },
    BrokenAt { seq: u64 },
}

impl fmt::Display for AuditVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ok { entries } => write!(f, "Ok ({entries} entries)"),
            Self::BrokenAt { seq } => write!(f, "BrokenAt({seq})"),
        }
    }
}

/// Recomputes the whole chain over a persisted log and reports the first
/// entry that fails to check out. Line `i` must hold the entry with seq `i`.
pub fn verify_audit(log: &[u8]) -> AuditVerdict {
    let mut prev = GENESIS_HASH.to_owned();
    let mut seq = 0u64;
    let mut rest = log;
    while !rest.is_empty() {
        let broken = AuditVerdict::BrokenAt { seq };
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return broken;
        };
        let line = &rest[..end];
        rest = &rest[end + 1..];
        let Ok(entry) = serde_json::from_slice::<AuditEntry>(line) else {
            return broken;
        };
        let reserialized = serde_json::to_vec(&entry).expect("entry serializes");
        if reserialized != line
            || entry.seq != seq
            || entry.prev_hash != prev
            || entry.payload_digest != sha256_hex(&canonical_payload(&entry.payload))
            || entry.entry_hash
                != chain_hash(&prev, entry.seq, entry.ts_ms, entry.kind, &entry.payload_digest)
        {
            return broken;
        }
        prev = entry.entry_hash;
        seq += 1;
    }
    AuditVerdict::Ok { entries: seq }
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("existing audit log is broken at seq {0}")]
    Corrupt(u64),
}

struct Inner {
    entries: Vec<AuditEntry>,
    file: Option<(File, PathBuf)>,
}

/// The live audit chain. Appends are serialized; a file-backed log is
/// synced to disk before `append` returns.
pub struct AuditLog {
    inner: Mutex<Inner>,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditLog").field("len", &self.len()).finish()
    }
}

impl Default for AuditLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                entries: Vec::new(),
                file: None,
            }),
        }
    }

    /// Opens an existing log (verifying it) or creates a new one.
    pub fn open(path: &Path) -> Result<Self, AuditError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        if let AuditVerdict::BrokenAt { seq } = verify_audit(&bytes) {
            return Err(AuditError::Corrupt(seq));
        }
        let entries = bytes
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_slice(l).expect("verified"))
            .collect();
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                entries,
                file: Some((file, path.to_owned())),
            }),
        })
    }

    pub fn append(&self, kind: AuditKind, payload: Value) -> Result<AuditEntry, AuditError> {
        self.append_at(kind, payload, now_ms())
    }

    pub fn append_at(&self, kind: AuditKind, payload: Value, ts_ms: i64) -> Result<AuditEntry, AuditError> {
        let mut inner = self.inner.lock();
        let seq = inner.entries.len() as u64;
        let prev_hash = inner
            .entries
            .last()
            .map_or_else(|| GENESIS_HASH.to_owned(), |e| e.entry_hash.clone());
        let payload_digest = sha256_hex(&canonical_payload(&payload));
        let entry_hash = chain_hash(&prev_hash, seq, ts_ms, kind, &payload_digest);
        let entry = AuditEntry {
            seq,
            ts_ms,
            kind,
            payload,
            payload_digest,
            prev_hash,
            entry_hash,
        };
        if let Some((file, _)) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(&entry).map_err(io::Error::other)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.sync_data()?;
        }
        inner.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.inner.lock().entries.clone()
    }

    pub fn count_kind(&self, kind: AuditKind) -> usize {
        self.inner.lock().entries.iter().filter(|e| e.kind == kind).count()
    }

    /// The persisted byte form of the whole log.
    pub fn to_bytes(&self) -> Vec<u8> {
        let inner = self.inner.lock();
        let mut out = Vec::new();
        for e in &inner.entries {
            out.extend(serde_json::to_vec(e).expect("entry serializes"));
            out.push(b'\n');
        }
        out
    }

    /// Verifies the chain as persisted: the file for a file-backed log,
    /// so edits made behind the process's back are caught.
    pub fn verify(&self) -> AuditVerdict {
        let path = self.inner.lock().file.as_ref().map(|(_, p)| p.clone());
        match path.map(std::fs::read) {
            Some(Ok(bytes)) => verify_audit(&bytes),
            Some(Err(_)) => AuditVerdict::BrokenAt { seq: 0 },
            None => verify_audit(&self.to_bytes()),
        }
    }
}
