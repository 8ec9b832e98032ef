//! The replica wire contract every model container serves:
//! `GET /healthz` and `POST /v1/infer_batch`.

use serde::{Deserialize, Serialize};

pub const HEALTH_PATH: &str = "/healthz";
pub const INFER_BATCH_PATH: &str = "/v1/infer_batch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub batch_id: String,
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub job_id: String,
    pub prompt: String,
    pub image_b64: String,
    pub media_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub batch_id: String,
    pub items: Vec<BatchResultItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResultItem {
    pub job_id: String,
    pub text: String,
    pub model_version: String,
    pub compute_ms: u64,
}
