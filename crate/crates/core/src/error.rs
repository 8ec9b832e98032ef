//! The hub-level error: every plane's error plus a stable code and a
//! class the HTTP layer maps to a status.

use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionError;
use crate::evaluation::{AuditError, EvaluationError};
use crate::gateway::{GatewayError, JobError};
use crate::registry::RegistryError;
use crate::runtime::RuntimeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorClass {
    /// The request is malformed or the target is in the wrong state.
    Precondition,
    NotFound,
    Conflict,
    /// The runtime, network or storage failed.
    Unavailable,
}

#[derive(Debug, thiserror::Error)]
pub enum HubError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("{model_id}@{version} is {status}; {action} needs {expected}")]
    WrongStatus {
        model_id: String,
        version: String,
        status: String,
        action: &'static str,
        expected: &'static str,
    },
    #[error("{0}")]
    Invalid(String),
}

use ErrorClass::*;

impl HubError {
    /// Stable machine-readable code, e.g. `ScoreOutOfRange`.
    pub fn code(&self) -> &'static str {
        self.describe().0
    }

    pub fn class(&self) -> ErrorClass {
        self.describe().1
    }

    fn describe(&self) -> (&'static str, ErrorClass) {
        match self {
            Self::Registry(e) => match e {
                RegistryError::DuplicateModelVersion { .. } => ("DuplicateModelVersion", Conflict),
                RegistryError::InvalidSource(_) => ("InvalidSource", Precondition),
                RegistryError::InvalidVersion => ("InvalidVersion", Precondition),
                RegistryError::UnknownModel { .. } => ("UnknownModel", NotFound),
                RegistryError::IllegalTransition { .. } => ("IllegalTransition", Conflict),
                RegistryError::MissingDigest => ("MissingDigest", Precondition),
                RegistryError::CorruptJournal { .. } => ("CorruptJournal", Unavailable),
                RegistryError::Io(_) => ("StorageFailure", Unavailable),
            },
            Self::Acquisition(e) => match e {
                AcquisitionError::NetworkUnreachable(_) => ("NetworkUnreachable", Unavailable),
                AcquisitionError::DigestMismatch { .. } => ("DigestMismatch", Unavailable),
                AcquisitionError::SourceMissing(_) => ("SourceMissing", NotFound),
                AcquisitionError::NotAcquiring(_) => ("IllegalTransition", Conflict),
                AcquisitionError::Busy(_) => ("AcquisitionInProgress", Conflict),
                AcquisitionError::InvalidManifest(_) => ("InvalidManifest", Unavailable),
                AcquisitionError::Io(_) => ("StorageFailure", Unavailable),
            },
            Self::Runtime(e) => match e {
                RuntimeError::RuntimeUnavailable(_) => ("RuntimeUnavailable", Unavailable),
                RuntimeError::BuildFailed(_) => ("BuildFailed", Unavailable),
                RuntimeError::BundleNotSealed { .. } => ("BundleNotSealed", Precondition),
                RuntimeError::StartupTimeout { .. } => ("StartupTimeout", Unavailable),
                RuntimeError::UnknownReplica(_) => ("UnknownReplica", NotFound),
                RuntimeError::Engine(_) => ("RuntimeUnavailable", Unavailable),
            },
            Self::Gateway(e) => match e {
                GatewayError::UnknownModel(_) => ("UnknownModel", NotFound),
                GatewayError::ModelNotRunning(_) => ("ModelNotRunning", Conflict),
                GatewayError::UnknownVersion { .. } => ("UnknownVersion", NotFound),
                GatewayError::ReplicaLost(_) => ("ReplicaLost", Unavailable),
                GatewayError::DeadlineExceeded(_) => ("DeadlineExceeded", Unavailable),
                GatewayError::SwapFailedRolledBack(_) => ("SwapFailedRolledBack", Unavailable),
                GatewayError::InvalidJob(j) => (
                    match j {
                        JobError::EmptyPrompt => "EmptyPrompt",
                        JobError::UnsupportedMediaType(_) => "UnsupportedMediaType",
                        JobError::UndecodableImage(_) => "UndecodableImage",
                        JobError::BadDimensions { .. } => "BadDimensions",
                    },
                    Precondition,
                ),
                GatewayError::Audit(_) => ("StorageFailure", Unavailable),
            },
            Self::Evaluation(e) => match e {
                EvaluationError::DuplicateCaseId(_) => ("DuplicateCaseId", Conflict),
                EvaluationError::MissingImage(_) => ("MissingImage", Precondition),
                EvaluationError::MalformedManifest { .. } => ("MalformedManifest", Precondition),
                EvaluationError::ScoreOutOfRange(_) => ("ScoreOutOfRange", Precondition),
                EvaluationError::UnknownCase(_) => ("UnknownCase", NotFound),
                EvaluationError::UnknownModel { .. } => ("UnknownModel", NotFound),
                EvaluationError::CorruptJournal(_) => ("CorruptJournal", Unavailable),
                EvaluationError::Io(_) => ("StorageFailure", Unavailable),
            },
            Self::Audit(_) => ("StorageFailure", Unavailable),
            Self::WrongStatus { .. } => ("IllegalTransition", Conflict),
            Self::Invalid(_) => ("InvalidRequest", Precondition),
        }
    }
}
