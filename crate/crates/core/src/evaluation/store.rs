use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::rubric::rubric_label;
use crate::time::{from_ms, now_ms};

pub const SCORE_CSV_HEADER: [&str; 8] = [
    "clinician_id",
    "dataset",
    "case_id",
    "model_id",
    "version",
    "score",
    "rubric_label",
    "ts_ms",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Dataset {
    Colon,
    Renal,
    Other(String),
}

impl From<String> for Dataset {
    fn from(s: String) -> Self {
        match s.to_ascii_lowercase().as_str() {
            "colon" => Self::Colon,
            "renal" => Self::Renal,
            _ => Self::Other(s),
        }
    }
}

impl From<Dataset> for String {
    fn from(d: Dataset) -> Self {
        d.to_string()
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Colon => f.write_str("colon"),
            Self::Renal => f.write_str("renal"),
            Self::Other(name) => f.write_str(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub dataset: Dataset,
    pub image_ref: String,
    pub prompt: String,
    pub source_note: String,
    #[serde(with = "chrono::serde::ts_milliseconds")]
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Deserialize)]
struct ManifestLine {
    case_id: String,
    dataset: String,
    image_path: String,
    prompt: String,
    #[serde(default)]
    source_note: String,
}

/// A score as submitted by a clinician, before validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDraft {
    pub clinician_id: String,
    pub case_id: String,
    pub model_id: String,
    pub version: String,
    pub score: i64,
    #[serde(default)]
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreEvent {
    pub score_id: String,
    pub clinician_id: String,
    pub case_id: String,
    pub model_id: String,
    pub version: String,
    pub score: u8,
    pub rubric_label: String,
    pub comment: String,
    pub ts_ms: i64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScoreFilter {
    pub dataset: Option<Dataset>,
    pub model_id: Option<String>,
    pub clinician_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub counts: [u64; 5],
    pub total: u64,
    /// Percent of `total` per score; all zero when `total` is zero.
    pub percentages: [f64; 5],
}

impl ScoreDistribution {
    fn from_counts(counts: [u64; 5]) -> Self {
        let total: u64 = counts.iter().sum();
        let mut percentages = [0.0; 5];
        if total > 0 {
            for (p, c) in percentages.iter_mut().zip(counts) {
                *p = c as f64 * 100.0 / total as f64;
            }
        }
        Self {
            counts,
            total,
            percentages,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluationError {
    #[error("duplicate case id {0}")]
    DuplicateCaseId(String),
    #[error("image for case {0} not found")]
    MissingImage(String),
    #[error("malformed manifest at line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("score {0} is outside the rubric range 0..=4")]
    ScoreOutOfRange(i64),
    #[error("unknown case {0}")]
    UnknownCase(String),
    #[error("unknown model {model_id} version {version}")]
    UnknownModel { model_id: String, version: String },
    #[error("corrupt evaluation journal at line {0}")]
    CorruptJournal(usize),
    #[error("evaluation storage: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload")]
enum StoreEvent {
    CasesIngested(Vec<CaseRecord>),
    ScoreSubmitted(ScoreEvent),
}

type Triple = (String, String, String);

/// Cases and score events, journaled to a line-delimited file.
///
/// Rescoring a (clinician, case, model) triple supersedes the current score
/// but every event stays in the journal.
pub struct EvaluationStore {
    cases: BTreeMap<String, CaseRecord>,
    case_order: Vec<String>,
    events: Vec<ScoreEvent>,
    current: HashMap<Triple, usize>,
    journal: Option<PathBuf>,
}

impl fmt::Debug for EvaluationStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvaluationStore")
            .field("cases", &self.cases.len())
            .field("events", &self.events.len())
            .finish()
    }
}

impl Default for EvaluationStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EvaluationStore {
    pub fn in_memory() -> Self {
        Self {
            cases: BTreeMap::new(),
            case_order: Vec::new(),
            events: Vec::new(),
            current: HashMap::new(),
            journal: None,
        }
    }

    pub fn open(journal: &Path) -> Result<Self, EvaluationError> {
        let mut store = Self::in_memory();
        match std::fs::read_to_string(journal) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    let event: StoreEvent = serde_json::from_str(line)
                        .map_err(|_| EvaluationError::CorruptJournal(i + 1))?;
                    store.apply(event);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                if let Some(parent) = journal.parent() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            Err(e) => return Err(e.into()),
        }
        store.journal = Some(journal.to_owned());
        Ok(store)
    }

    pub fn case(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.get(case_id)
    }

    pub fn cases(&self) -> impl Iterator<Item = &CaseRecord> {
        self.case_order.iter().map(|id| &self.cases[id])
    }

    pub fn case_count(&self) -> usize {
        self.cases.len()
    }

    /// Every score event ever submitted, superseded ones included.
    pub fn events(&self) -> &[ScoreEvent] {
        &self.events
    }

    /// Current scores in submission order.
    pub fn current_scores(&self) -> Vec<&ScoreEvent> {
        let mut idx: Vec<usize> = self.current.values().copied().collect();
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.events[i]).collect()
    }

    pub fn current_score(&self, clinician_id: &str, case_id: &str, model_id: &str) -> Option<&ScoreEvent> {
        self.current
            .get(&(clinician_id.to_owned(), case_id.to_owned(), model_id.to_owned()))
            .map(|&i| &self.events[i])
    }

    /// Ingests a line-delimited JSON manifest. Relative image paths resolve
    /// against `base_dir`. Nothing is stored unless every line is valid.
    pub fn ingest_cases(&mut self, manifest: &str, base_dir: &Path) -> Result<Vec<CaseRecord>, EvaluationError> {
        let created_at = from_ms(now_ms());
        let mut batch: Vec<CaseRecord> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in manifest.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: ManifestLine =
                serde_json::from_str(raw).map_err(|e| EvaluationError::MalformedManifest {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            if line.case_id.trim().is_empty() || line.prompt.trim().is_empty() {
                return Err(EvaluationError::MalformedManifest {
                    line: i + 1,
                    reason: "case_id and prompt must be non-empty".into(),
                });
            }
            if self.cases.contains_key(&line.case_id) || !seen.insert(line.case_id.clone()) {
                return Err(EvaluationError::DuplicateCaseId(line.case_id));
            }
            let path = base_dir.join(&line.image_path);
            if !path.is_file() {
                return Err(EvaluationError::MissingImage(line.case_id));
            }
            batch.push(CaseRecord {
                case_id: line.case_id,
                dataset: Dataset::from(line.dataset),
                image_ref: path.to_string_lossy().into_owned(),
                prompt: line.prompt,
                source_note: line.source_note,
                created_at,
            });
        }
        self.persist(StoreEvent::CasesIngested(batch.clone()))?;
        Ok(batch)
    }

    /// Validates and records a score. `model_known` answers whether the
    /// (model, version) pair is registered.
    pub fn submit_score(
        &mut self,
        draft: ScoreDraft,
        model_known: impl FnOnce(&str, &str) -> bool,
    ) -> Result<ScoreEvent, EvaluationError> {
        let label = rubric_label(draft.score).ok_or(EvaluationError::ScoreOutOfRange(draft.score))?;
        if !self.cases.contains_key(&draft.case_id) {
            return Err(EvaluationError::UnknownCase(draft.case_id));
        }
        if !model_known(&draft.model_id, &draft.version) {
            return Err(EvaluationError::UnknownModel {
                model_id: draft.model_id,
                version: draft.version,
            });
        }
        let event = ScoreEvent {
            score_id: format!("score-{}", self.events.len()),
            clinician_id: draft.clinician_id,
            case_id: draft.case_id,
            model_id: draft.model_id,
            version: draft.version,
            score: draft.score as u8,
            rubric_label: label.to_owned(),
            comment: draft.comment,
            ts_ms: now_ms(),
        };
        self.persist(StoreEvent::ScoreSubmitted(event.clone()))?;
        Ok(event)
    }

    pub fn aggregate_scores(&self, filter: &ScoreFilter) -> ScoreDistribution {
        let mut counts = [0u64; 5];
        for event in self.current_scores() {
            if self.matches(event, filter) {
                counts[event.score as usize] += 1;
            }
        }
        ScoreDistribution::from_counts(counts)
    }

    fn matches(&self, event: &ScoreEvent, filter: &ScoreFilter) -> bool {
        filter.model_id.as_ref().is_none_or(|m| *m == event.model_id)
            && filter.clinician_id.as_ref().is_none_or(|c| *c == event.clinician_id)
            && filter
                .dataset
                .as_ref()
                .is_none_or(|d| self.cases.get(&event.case_id).is_some_and(|c| c.dataset == *d))
    }

    /// One RFC-4180 row per current score, in submission order.
    pub fn export_scores_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SCORE_CSV_HEADER).expect("in-memory write");
        for e in self.current_scores() {
            let dataset = self
                .cases
                .get(&e.case_id)
                .map(|c| c.dataset.to_string())
                .unwrap_or_default();
            w.write_record([
                e.clinician_id.as_str(),
                dataset.as_str(),
                e.case_id.as_str(),
                e.model_id.as_str(),
                e.version.as_str(),
                &e.score.to_string(),
                e.rubric_label.as_str(),
                &e.ts_ms.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    fn persist(&mut self, event: StoreEvent) -> Result<(), EvaluationError> {
        if let Some(path) = &self.journal {
            let mut line = serde_json::to_vec(&event).map_err(io::Error::other)?;
            line.push(b'\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(&line)?;
            f.sync_data()?;
        }
        self.apply(event);
        Ok(())
    }

    fn apply(&mut self, event: StoreEvent) {
        match event {
            StoreEvent::CasesIngested(cases) => {
                for case in cases {
                    self.case_order.push(case.case_id.clone());
                    self.cases.insert(case.case_id.clone(), case);
                }
            }
            StoreEvent::ScoreSubmitted(e) => {
                let key = (e.clinician_id.clone(), e.case_id.clone(), e.model_id.clone());
                self.current.insert(key, self.events.len());
                self.events.push(e);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_with(dir: &Path, dataset: &str, ids: &[&str]) -> String {
        std::fs::write(dir.join("patch.png"), b"png").unwrap();
        ids.iter()
            .map(|id| {
                format!(
                    r#"{{"case_id":"{id}","dataset":"{dataset}","image_path":"patch.png","prompt":"Describe","source_note":"n"}}"#
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn draft(clin: &str, case: &str, score: i64) -> ScoreDraft {
        ScoreDraft {
            clinician_id: clin.into(),
            case_id: case.into(),
            model_id: "m".into(),
            version: "1".into(),
            score,
            comment: String::new(),
        }
    }

    #[test]
    fn duplicate_case_is_atomic() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EvaluationStore::in_memory();
        let manifest = manifest_with(dir.path(), "colon", &["c1", "c2", "c1"]);
        let err = store.ingest_cases(&manifest, dir.path()).unwrap_err();
        assert!(matches!(err, EvaluationError::DuplicateCaseId(id) if id == "c1"));
        assert_eq!(store.case_count(), 0);
    }

    #[test]
    fn missing_image_and_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EvaluationStore::in_memory();
        let bad = r#"{"case_id":"x","dataset":"renal","image_path":"nope.png","prompt":"p"}"#;
        assert!(matches!(
            store.ingest_cases(bad, dir.path()),
            Err(EvaluationError::MissingImage(id)) if id == "x"
        ));
        let manifest = format!("{}\n{{not json", manifest_with(dir.path(), "renal", &["a"]));
        assert!(matches!(
            store.ingest_cases(&manifest, dir.path()),
            Err(EvaluationError::MalformedManifest { line: 2, .. })
        ));
        assert_eq!(store.case_count(), 0);
    }

    #[test]
    fn supersede_keeps_history() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EvaluationStore::in_memory();
        store
            .ingest_cases(&manifest_with(dir.path(), "colon", &["c1"]), dir.path())
            .unwrap();
        store.submit_score(draft("dr", "c1", 3), |_, _| true).unwrap();
        store.submit_score(draft("dr", "c1", 2), |_, _| true).unwrap();
        assert_eq!(store.events().len(), 2);
        assert_eq!(store.current_score("dr", "c1", "m").unwrap().score, 2);
        let dist = store.aggregate_scores(&ScoreFilter::default());
        assert_eq!(dist.total, 1);
        assert_eq!(dist.counts[2], 1);
    }

    #[test]
    fn score_validation_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EvaluationStore::in_memory();
        store
            .ingest_cases(&manifest_with(dir.path(), "colon", &["c1"]), dir.path())
            .unwrap();
        assert!(matches!(
            store.submit_score(draft("dr", "zz", 5), |_, _| true),
            Err(EvaluationError::ScoreOutOfRange(5))
        ));
        assert!(matches!(
            store.submit_score(draft("dr", "zz", 1), |_, _| true),
            Err(EvaluationError::UnknownCase(_))
        ));
        assert!(matches!(
            store.submit_score(draft("dr", "c1", 1), |_, _| false),
            Err(EvaluationError::UnknownModel { .. })
        ));
        let e = store.submit_score(draft("dr", "c1", 4), |_, _| true).unwrap();
        assert_eq!(e.rubric_label, "Correct answer with correct reasoning");
    }

    #[test]
    fn empty_aggregate_and_export() {
        let store = EvaluationStore::in_memory();
        let dist = store.aggregate_scores(&ScoreFilter::default());
        assert_eq!(dist.total, 0);
        assert_eq!(dist.percentages, [0.0; 5]);
        assert_eq!(
            store.export_scores_csv(),
            "clinician_id,dataset,case_id,model_id,version,score,rubric_label,ts_ms\n"
        );
    }

    #[test]
    fn export_has_a_row_per_clinician() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EvaluationStore::in_memory();
        store
            .ingest_cases(&manifest_with(dir.path(), "colon", &["c1"]), dir.path())
            .unwrap();
        store.submit_score(draft("a", "c1", 4), |_, _| true).unwrap();
        store.submit_score(draft("b", "c1", 0), |_, _| true).unwrap();
        let csv = store.export_scores_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("a,colon,c1,m,1,4,Correct answer with correct reasoning,"));
    }

    #[test]
    fn journal_reopen_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.journal");
        {
            let mut store = EvaluationStore::open(&path).unwrap();
            store
                .ingest_cases(&manifest_with(dir.path(), "renal", &["r1"]), dir.path())
                .unwrap();
            store.submit_score(draft("dr", "r1", 1), |_, _| true).unwrap();
            store.submit_score(draft("dr", "r1", 3), |_, _| true).unwrap();
        }
        let store = EvaluationStore::open(&path).unwrap();
        assert_eq!(store.case(&"r1".to_string()).unwrap().dataset, Dataset::Renal);
        assert_eq!(store.events().len(), 2);
        assert_eq!(store.current_score("dr", "r1", "m").unwrap().score, 3);
    }
}
