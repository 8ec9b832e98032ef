//! Typed HTTP client for the model hub service.

use std::path::Path;

use reqwest::multipart::{Form, Part};
use reqwest::RequestBuilder;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use modelhub_core::evaluation::{AuditVerdict, ScoreDistribution, ScoreEvent};
pub use modelhub_core::gateway::{InferenceResult, SwapReport};
pub use modelhub_core::hub::ModelView;
pub use modelhub_core::registry::ModelRecord;
pub use modelhub_core::telemetry::SeriesRow;

pub const DEFAULT_SERVICE_URL: &str = "http://127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error body.
    #[error("{error_code}: {message}")]
    Api {
        status: u16,
        error_code: String,
        message: String,
    },
    #[error("service unreachable: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn error_code(&self) -> &str {
        match self {
            Self::Api { error_code, .. } => error_code,
            Self::Transport(_) => "ServiceUnreachable",
            Self::Decode(_) => "BadResponse",
        }
    }
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error_code: String,
    message: String,
}

/// Where a model's weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Hub(String),
    Local(String),
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ScoreRequest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clinician_id: Option<String>,
    pub case_id: String,
    pub model_id: String,
    pub version: String,
    pub score: i64,
    pub comment: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AggregateQuery {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clinician_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct IngestSummary {
    pub ingested: usize,
    pub case_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AnalyzeRequest {
    pub model_id: String,
    pub version: Option<String>,
    pub prompt: String,
    pub image: Vec<u8>,
    pub file_name: String,
    pub deadline_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn send(&self, req: RequestBuilder) -> Result<reqwest::Response, ClientError> {
        let resp = req.send().await?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let text = resp.text().await?;
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => ClientError::Api {
                status: status.as_u16(),
                error_code: b.error_code,
                message: b.message,
            },
            Err(_) => ClientError::Api {
                status: status.as_u16(),
                error_code: status.canonical_reason().unwrap_or("HttpError").replace(' ', ""),
                message: text,
            },
        })
    }

    async fn json<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ClientError> {
        let text = self.send(req).await?.text().await?;
        serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))
    }

    async fn text(&self, req: RequestBuilder) -> Result<String, ClientError> {
        Ok(self.send(req).await?.text().await?)
    }

    pub async fn health(&self) -> Result<serde_json::Value, ClientError> {
        self.json(self.http.get(self.url("/healthz"))).await
    }

    pub async fn register(&self, source: &Source, display_name: Option<&str>, version: &str) -> Result<ModelRecord, ClientError> {
        let mut body = serde_json::json!({"version": version});
        match source {
            Source::Hub(repo) => body["repo_id"] = repo.as_str().into(),
            Source::Local(path) => body["local_path"] = path.as_str().into(),
        }
        if let Some(name) = display_name {
            body["display_name"] = name.into();
        }
        self.json(self.http.post(self.url("/api/models")).json(&body)).await
    }

    pub async fn list_models(&self, status: Option<&str>) -> Result<Vec<ModelView>, ClientError> {
        let mut req = self.http.get(self.url("/api/models"));
        if let Some(s) = status {
            req = req.query(&[("status", s)]);
        }
        self.json(req).await
    }

    pub async fn model(&self, model_id: &str, version: &str) -> Result<ModelView, ClientError> {
        self.json(self.http.get(self.url(&format!("/api/models/{model_id}/{version}")))).await
    }

    fn lifecycle(&self, model_id: &str, version: &str, action: &str) -> RequestBuilder {
        self.http.post(self.url(&format!("/api/models/{model_id}/{version}/{action}")))
    }

    pub async fn acquire(&self, model_id: &str, version: &str) -> Result<ModelRecord, ClientError> {
        self.json(self.lifecycle(model_id, version, "acquire")).await
    }

    pub async fn start(&self, model_id: &str, version: &str, replicas: Option<usize>) -> Result<ModelRecord, ClientError> {
        let mut req = self.lifecycle(model_id, version, "start");
        if let Some(n) = replicas {
            req = req.query(&[("replicas", n)]);
        }
        self.json(req).await
    }

    pub async fn stop(&self, model_id: &str, version: &str) -> Result<ModelRecord, ClientError> {
        self.json(self.lifecycle(model_id, version, "stop")).await
    }

    pub async fn swap(&self, model_id: &str, new_version: &str) -> Result<SwapReport, ClientError> {
        self.json(self.lifecycle(model_id, new_version, "swap")).await
    }

    pub async fn analyze(&self, req: AnalyzeRequest) -> Result<InferenceResult, ClientError> {
        let mut form = Form::new()
            .text("model_id", req.model_id)
            .text("prompt", req.prompt)
            .part("image", Part::bytes(req.image).file_name(req.file_name));
        if let Some(v) = req.version {
            form = form.text("version", v);
        }
        if let Some(d) = req.deadline_ms {
            form = form.text("deadline_ms", d.to_string());
        }
        self.json(self.http.post(self.url("/api/analyze")).multipart(form)).await
    }

    pub async fn telemetry(&self, model_id: &str, from_ms: Option<i64>, to_ms: Option<i64>) -> Result<Vec<SeriesRow>, ClientError> {
        let mut req = self.http.get(self.url(&format!("/api/telemetry/{model_id}")));
        if let Some(f) = from_ms {
            req = req.query(&[("from_ms", f)]);
        }
        if let Some(t) = to_ms {
            req = req.query(&[("to_ms", t)]);
        }
        self.json(req).await
    }

    pub async fn ingest_cases(&self, manifest: &str, base_dir: &Path) -> Result<IngestSummary, ClientError> {
        let body = serde_json::json!({"manifest": manifest, "base_dir": base_dir});
        self.json(self.http.post(self.url("/api/cases/ingest")).json(&body)).await
    }

    pub async fn submit_score(&self, score: &ScoreRequest) -> Result<ScoreEvent, ClientError> {
        self.json(self.http.post(self.url("/api/scores")).json(score)).await
    }

    pub async fn aggregate(&self, query: &AggregateQuery) -> Result<ScoreDistribution, ClientError> {
        self.json(self.http.get(self.url("/api/scores/aggregate")).query(query)).await
    }

    pub async fn export_scores_csv(&self) -> Result<String, ClientError> {
        self.text(self.http.get(self.url("/api/export/scores.csv"))).await
    }

    pub async fn verify_audit(&self) -> Result<AuditVerdict, ClientError> {
        self.json(self.http.get(self.url("/api/audit/verify"))).await
    }
}
