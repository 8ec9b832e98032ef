//! Clinician-in-the-loop evaluation: case ingestion, rubric scoring,
//! aggregate score distributions and exports, plus the hash-chained audit
//! log shared by every plane of the hub.

pub mod audit;
pub mod rubric;
mod store;

pub use audit::{verify_audit, AuditEntry, AuditError, AuditKind, AuditLog, AuditVerdict};
pub use rubric::{rubric_label, RUBRIC};
pub use store::{
    CaseRecord, Dataset, EvaluationError, EvaluationStore, ScoreDistribution, ScoreDraft,
    ScoreEvent, ScoreFilter, SCORE_CSV_HEADER,
};
