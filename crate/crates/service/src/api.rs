//! HTTP surface. Each route delegates to one [`Hub`] operation; failures
//! become `{error_code, message}` bodies.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::multipart::MultipartError;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{any, get, post};
use axum::{Json, Router};
use modelhub_core::evaluation::{Dataset, ScoreDraft, ScoreFilter};
use modelhub_core::hub::AnalyzeRequest;
use modelhub_core::registry::{ModelSource, ModelStatus};
use modelhub_core::telemetry::series_csv;
use modelhub_core::time::now_ms;
use modelhub_core::{ErrorClass, Hub, HubError};
use serde::Deserialize;
use serde_json::{json, Value};

/// Upload cap for `POST /api/analyze`.
pub const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;
/// Telemetry window when the query names none.
pub const DEFAULT_WINDOW_MS: i64 = 3_600_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteSpec {
    pub method: &'static str,
    pub path: &'static str,
    /// The hub operation behind the route.
    pub operation: &'static str,
}

const fn route(method: &'static str, path: &'static str, operation: &'static str) -> RouteSpec {
    RouteSpec { method, path, operation }
}

pub const ROUTES: &[RouteSpec] = &[
    route("GET", "/healthz", "health"),
    route("POST", "/api/models", "register_model"),
    route("GET", "/api/models", "list_models"),
    route("GET", "/api/models/{id}/{ver}", "model"),
    route("POST", "/api/models/{id}/{ver}/acquire", "acquire"),
    route("POST", "/api/models/{id}/{ver}/start", "start"),
    route("POST", "/api/models/{id}/{ver}/stop", "stop"),
    route("POST", "/api/models/{id}/{ver}/swap", "swap"),
    route("POST", "/api/analyze", "analyze"),
    route("GET", "/api/telemetry/{model}", "telemetry_series"),
    route("POST", "/api/cases/ingest", "ingest_cases"),
    route("POST", "/api/scores", "submit_score"),
    route("GET", "/api/scores/aggregate", "aggregate_scores"),
    route("GET", "/api/export/scores.csv", "export_scores_csv"),
    route("GET", "/api/audit/verify", "verify_audit"),
];

#[derive(Clone)]
pub struct AppState {
    pub hub: Arc<Hub>,
    pub clinician_id: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_owned(),
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidRequest", message)
    }
}

pub fn status_for(class: ErrorClass) -> StatusCode {
    match class {
        ErrorClass::Precondition => StatusCode::BAD_REQUEST,
        ErrorClass::NotFound => StatusCode::NOT_FOUND,
        ErrorClass::Conflict => StatusCode::CONFLICT,
        ErrorClass::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
    }
}

impl From<HubError> for ApiError {
    fn from(e: HubError) -> Self {
        Self::new(status_for(e.class()), e.code(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::invalid(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::invalid(e.body_text())
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            Self::new(StatusCode::PAYLOAD_TOO_LARGE, "PayloadTooLarge", e.body_text())
        } else {
            Self::invalid(e.body_text())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error_code": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/api/models", post(register).get(list))
        .route("/api/models/{id}/{ver}", get(model))
        .route("/api/models/{id}/{ver}/acquire", post(acquire))
        .route("/api/models/{id}/{ver}/start", post(start))
        .route("/api/models/{id}/{ver}/stop", post(stop))
        .route("/api/models/{id}/{ver}/swap", post(swap))
        .route(
            "/api/analyze",
            post(analyze).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .route("/api/telemetry/{model}", get(telemetry))
        .route("/api/cases/ingest", post(ingest))
        .route("/api/scores", post(score))
        .route("/api/scores/aggregate", get(aggregate))
        .route("/api/export/scores.csv", get(export_csv))
        .route("/api/audit/verify", get(verify))
        .route("/api/ext", any(extension))
        .route("/api/ext/{*rest}", any(extension))
        .fallback(no_route)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state)
}

async fn no_route() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NoRoute", "no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed", "method not allowed here")
}

/// Reserved for integrations such as EHR connectors.
async fn extension() -> ApiError {
    ApiError::new(
        StatusCode::NOT_IMPLEMENTED,
        "NotImplemented",
        "/api/ext/ is reserved for integrations",
    )
}

async fn health(State(s): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "models": s.hub.list_models(None).len(),
        "audit_entries": s.hub.audit().len(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterBody {
    repo_id: Option<String>,
    local_path: Option<String>,
    display_name: Option<String>,
    version: String,
}

async fn register(
    State(s): State<AppState>,
    body: Result<Json<RegisterBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(b) = body?;
    let source = match (b.repo_id, b.local_path) {
        (Some(repo), None) => ModelSource::hub(repo),
        (None, Some(path)) => ModelSource::local(path),
        _ => return Err(ApiError::invalid("exactly one of repo_id and local_path is required")),
    };
    let name = b.display_name.unwrap_or_else(|| default_name(&source));
    let record = s.hub.register_model(source, &name, &b.version)?;
    Ok((StatusCode::CREATED, Json(record)))
}

fn default_name(source: &ModelSource) -> String {
    let raw = match source {
        ModelSource::RemoteHub { repo_id } => repo_id.as_str(),
        ModelSource::LocalPath { path } => path.trim_end_matches('/'),
    };
    raw.rsplit('/').next().unwrap_or(raw).to_owned()
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
}

async fn list(State(s): State<AppState>, q: Result<Query<ListQuery>, QueryRejection>) -> ApiResult<impl IntoResponse> {
    let Query(q) = q?;
    let status = match q.status.as_deref() {
        None => None,
        Some(name) => Some(ModelStatus::from_name(name).ok_or_else(|| ApiError::invalid(format!("unknown status {name}")))?),
    };
    Ok(Json(s.hub.list_models(status.as_ref())))
}

async fn model(State(s): State<AppState>, Path((id, ver)): Path<(String, String)>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.hub.model(&id, &ver)?))
}

async fn acquire(State(s): State<AppState>, Path((id, ver)): Path<(String, String)>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.hub.acquire(&id, &ver).await?))
}

#[derive(Debug, Deserialize)]
struct StartQuery {
    replicas: Option<usize>,
}

async fn start(
    State(s): State<AppState>,
    Path((id, ver)): Path<(String, String)>,
    q: Result<Query<StartQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = q?;
    Ok(Json(s.hub.start(&id, &ver, q.replicas).await?))
}

async fn stop(State(s): State<AppState>, Path((id, ver)): Path<(String, String)>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.hub.stop(&id, &ver).await?))
}

async fn swap(State(s): State<AppState>, Path((id, ver)): Path<(String, String)>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.hub.swap(&id, &ver).await?))
}

/// Multipart fields: `image` (file), `prompt`, `model_id`, and optionally
/// `version`, `media_type` and `deadline_ms`.
async fn analyze(State(s): State<AppState>, mut form: Multipart) -> ApiResult<impl IntoResponse> {
    let mut image = None;
    let mut media_type = None;
    let mut text = std::collections::HashMap::new();
    while let Some(field) = form.next_field().await? {
        let name = field.name().unwrap_or_default().to_owned();
        if name == "image" {
            if let Some(ct) = field.content_type().and_then(|c| c.strip_prefix("image/")) {
                media_type = Some(ct.to_owned());
            }
            image = Some(field.bytes().await?.to_vec());
        } else {
            text.insert(name, field.text().await?);
        }
    }
    let required = |key: &str, text: &mut std::collections::HashMap<String, String>| {
        text.remove(key).ok_or_else(|| ApiError::invalid(format!("missing field {key}")))
    };
    let model_id = required("model_id", &mut text)?;
    let prompt = required("prompt", &mut text)?;
    let image = image.ok_or_else(|| ApiError::invalid("missing field image"))?;
    let deadline_ms = match text.remove("deadline_ms") {
        Some(d) => Some(d.trim().parse().map_err(|_| ApiError::invalid("deadline_ms must be an integer"))?),
        None => None,
    };
    let req = AnalyzeRequest {
        model_id,
        version: text.remove("version").filter(|v| !v.is_empty()),
        prompt,
        image,
        media_type: text.remove("media_type").or(media_type),
        deadline_ms,
    };
    Ok(Json(s.hub.analyze(req).await?))
}

#[derive(Debug, Deserialize)]
struct TelemetryQuery {
    from_ms: Option<i64>,
    to_ms: Option<i64>,
    format: Option<String>,
}

async fn telemetry(
    State(s): State<AppState>,
    Path(model): Path<String>,
    q: Result<Query<TelemetryQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = q?;
    let to = q.to_ms.unwrap_or_else(now_ms);
    let from = q.from_ms.unwrap_or(to - DEFAULT_WINDOW_MS);
    let rows = s.hub.telemetry_series(&model, from, to)?;
    Ok(match q.format.as_deref() {
        Some("csv") => csv_response(series_csv(&rows)),
        None | Some("json") => Json(rows).into_response(),
        Some(other) => return Err(ApiError::invalid(format!("unknown format {other}"))),
    })
}

fn csv_response(body: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestBody {
    /// Manifest text, one JSON object per line.
    manifest: String,
    /// Directory the manifest's image paths are relative to.
    base_dir: PathBuf,
}

async fn ingest(
    State(s): State<AppState>,
    body: Result<Json<IngestBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(b) = body?;
    let cases = s.hub.ingest_cases(&b.manifest, &b.base_dir)?;
    let ids: Vec<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
    Ok((StatusCode::CREATED, Json(json!({"ingested": cases.len(), "case_ids": ids}))))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreBody {
    clinician_id: Option<String>,
    case_id: String,
    model_id: String,
    version: String,
    score: i64,
    #[serde(default)]
    comment: String,
}

async fn score(State(s): State<AppState>, body: Result<Json<ScoreBody>, JsonRejection>) -> ApiResult<impl IntoResponse> {
    let Json(b) = body?;
    let event = s.hub.submit_score(ScoreDraft {
        clinician_id: b.clinician_id.unwrap_or_else(|| s.clinician_id.clone()),
        case_id: b.case_id,
        model_id: b.model_id,
        version: b.version,
        score: b.score,
        comment: b.comment,
    })?;
    Ok((StatusCode::CREATED, Json(event)))
}

#[derive(Debug, Deserialize)]
struct AggregateQuery {
    dataset: Option<String>,
    model_id: Option<String>,
    clinician_id: Option<String>,
}

async fn aggregate(
    State(s): State<AppState>,
    q: Result<Query<AggregateQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = q?;
    Ok(Json(s.hub.aggregate_scores(&ScoreFilter {
        dataset: q.dataset.map(Dataset::from),
        model_id: q.model_id,
        clinician_id: q.clinician_id,
    })))
}

async fn export_csv(State(s): State<AppState>) -> ApiResult<Response> {
    Ok(csv_response(s.hub.export_scores_csv()?))
}

async fn verify(State(s): State<AppState>) -> Json<Value> {
    let verdict = s.hub.verify_audit();
    let mut body = serde_json::to_value(verdict).expect("verdict serializes");
    body["summary"] = Value::String(verdict.to_string());
    Json(body)
}
