//! Docker Engine API adapter over the local unix socket.

use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::{Method, Request, StatusCode};
use hyper_util::rt::TokioIo;
use serde_json::{json, Value};
use tokio::net::UnixStream;

use super::engine::{
    ContainerRuntime, ContainerStats, CreateRequest, EngineError, ImageSpec, MANAGED_LABEL, REPLICA_PORT,
    SECRET_NETWORK,
};
use crate::net::Egress;

const API_PREFIX: &str = "/v1.43";

pub struct DockerEngine {
    socket: PathBuf,
    egress: Arc<Egress>,
}

impl DockerEngine {
    pub fn new(socket: impl Into<PathBuf>, egress: Arc<Egress>) -> Self {
        Self {
            socket: socket.into(),
            egress,
        }
    }

    async fn call(
        &self,
        method: Method,
        path: &str,
        content_type: &str,
        body: Bytes,
    ) -> Result<(StatusCode, Bytes), EngineError> {
        self.egress.record_socket(&self.socket.to_string_lossy());
        let stream = UnixStream::connect(&self.socket)
            .await
            .map_err(|e| EngineError::Unavailable(format!("{}: {e}", self.socket.display())))?;
        let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
            .await
            .map_err(|e| EngineError::Unavailable(e.to_string()))?;
        tokio::spawn(conn);
        let req = Request::builder()
            .method(method)
            .uri(format!("{API_PREFIX}{path}"))
            .header("Host", "docker")
            .header("Content-Type", content_type)
            .body(Full::new(body))
            .map_err(|e| EngineError::Request(e.to_string()))?;
        let resp = sender
            .send_request(req)
            .await
            .map_err(|e| EngineError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let bytes = resp
            .into_body()
            .collect()
            .await
            .map_err(|e| EngineError::Request(e.to_string()))?
            .to_bytes();
        Ok((status, bytes))
    }

    async fn call_json(&self, method: Method, path: &str, body: Option<&Value>) -> Result<(StatusCode, Value), EngineError> {
        let payload = body.map_or_else(Bytes::new, |b| Bytes::from(b.to_string()));
        let (status, bytes) = self.call(method, path, "application/json", payload).await?;
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        Ok((status, value))
    }

    fn check(status: StatusCode, body: &Value, id: &str) -> Result<(), EngineError> {
        match status {
            s if s.is_success() || s == StatusCode::NOT_MODIFIED => Ok(()),
            StatusCode::NOT_FOUND => Err(EngineError::NoSuchContainer(id.to_owned())),
            s => Err(EngineError::Request(format!("{s}: {body}"))),
        }
    }

    /// Creates the secret network if it does not exist yet.
    pub async fn ensure_secret_network(&self) -> Result<(), EngineError> {
        let body = json!({"Name": SECRET_NETWORK, "Internal": true, "CheckDuplicate": true});
        let (status, value) = self.call_json(Method::POST, "/networks/create", Some(&body)).await?;
        if status == StatusCode::CONFLICT {
            return Ok(());
        }
        Self::check(status, &value, SECRET_NETWORK)
    }
}

fn build_context(spec: &ImageSpec) -> Result<Vec<u8>, EngineError> {
    let mut dockerfile = format!("FROM {}\n", spec.base);
    for (k, v) in &spec.labels {
        dockerfile.push_str(&format!("LABEL {k}={}\n", serde_json::to_string(v).expect("string")));
    }
    dockerfile.push_str("ENV MODELHUB_WEIGHTS=/weights\n");
    let mut builder = tar::Builder::new(Vec::new());
    let mut header = tar::Header::new_gnu();
    header.set_size(dockerfile.len() as u64);
    header.set_mode(0o644);
    header.set_cksum();
    builder
        .append_data(&mut header, "Dockerfile", dockerfile.as_bytes())
        .map_err(|e| EngineError::BuildFailed(e.to_string()))?;
    builder.into_inner().map_err(|e| EngineError::BuildFailed(e.to_string()))
}

fn enc(s: &str) -> String {
    url::form_urlencoded::byte_serialize(s.as_bytes()).collect()
}

#[async_trait]
impl ContainerRuntime for DockerEngine {
    async fn ping(&self) -> Result<(), EngineError> {
        let (status, _) = self.call(Method::GET, "/_ping", "text/plain", Bytes::new()).await?;
        if status.is_success() {
            Ok(())
        } else {
            Err(EngineError::Unavailable(format!("ping answered {status}")))
        }
    }

    async fn build_image(&self, spec: &ImageSpec) -> Result<(), EngineError> {
        let context = build_context(spec)?;
        let path = format!("/build?t={}&rm=1", enc(&spec.tag));
        let (status, body) = self
            .call(Method::POST, &path, "application/x-tar", Bytes::from(context))
            .await?;
        let log = String::from_utf8_lossy(&body);
        // The build stream reports failures inline with a 200 status.
        if !status.is_success() || log.contains("\"error\"") {
            return Err(EngineError::BuildFailed(log.into_owned()));
        }
        Ok(())
    }

    async fn create(&self, name: &str, request: &CreateRequest) -> Result<String, EngineError> {
        self.ensure_secret_network().await?;
        let body = serde_json::to_value(request).map_err(|e| EngineError::Request(e.to_string()))?;
        let (status, value) = self
            .call_json(Method::POST, &format!("/containers/create?name={}", enc(name)), Some(&body))
            .await?;
        Self::check(status, &value, name)?;
        value["Id"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| EngineError::Request(format!("create returned no Id: {value}")))
    }

    async fn start(&self, id: &str) -> Result<(), EngineError> {
        let (status, value) = self.call_json(Method::POST, &format!("/containers/{id}/start"), None).await?;
        Self::check(status, &value, id)
    }

    async fn endpoint(&self, id: &str) -> Result<String, EngineError> {
        let (status, value) = self.call_json(Method::GET, &format!("/containers/{id}/json"), None).await?;
        Self::check(status, &value, id)?;
        let ip = value["NetworkSettings"]["Networks"][SECRET_NETWORK]["IPAddress"]
            .as_str()
            .filter(|ip| !ip.is_empty())
            .ok_or_else(|| EngineError::Request(format!("{id} has no address on {SECRET_NETWORK}")))?;
        Ok(format!("{ip}:{REPLICA_PORT}"))
    }

    async fn stop(&self, id: &str, grace_secs: u64) -> Result<(), EngineError> {
        let (status, value) = self
            .call_json(Method::POST, &format!("/containers/{id}/stop?t={grace_secs}"), None)
            .await?;
        Self::check(status, &value, id)?;
        let (status, value) = self
            .call_json(Method::POST, &format!("/containers/{id}/wait?condition=not-running"), None)
            .await?;
        Self::check(status, &value, id)
    }

    async fn remove(&self, id: &str) -> Result<(), EngineError> {
        let (status, value) = self
            .call_json(Method::DELETE, &format!("/containers/{id}?force=true"), None)
            .await?;
        Self::check(status, &value, id)
    }

    async fn stats(&self, id: &str) -> Result<ContainerStats, EngineError> {
        let (status, value) = self
            .call_json(Method::GET, &format!("/containers/{id}/stats?stream=false"), None)
            .await?;
        Self::check(status, &value, id)?;
        Ok(ContainerStats {
            gpu_util_pct: None,
            mem_bytes: value["memory_stats"]["usage"].as_u64().unwrap_or(0),
        })
    }

    async fn list(&self) -> Result<Vec<String>, EngineError> {
        let filters = json!({"label": [format!("{MANAGED_LABEL}=true")]}).to_string();
        let (status, value) = self
            .call_json(Method::GET, &format!("/containers/json?all=true&filters={}", enc(&filters)), None)
            .await?;
        Self::check(status, &value, "list")?;
        Ok(value
            .as_array()
            .map(|items| {
                items
                    .iter()
                    .filter_map(|c| c["Id"].as_str().map(str::to_owned))
                    .collect()
            })
            .unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use axum::extract::{Path, State};
    use axum::routing::{delete, get, post};
    use axum::{Json, Router};
    use parking_lot::Mutex;

    use super::*;

    #[derive(Default)]
    struct FakeEngine {
        created: Mutex<Vec<Value>>,
        calls: Mutex<Vec<String>>,
    }

    async fn fake_engine(dir: &std::path::Path) -> (PathBuf, Arc<FakeEngine>) {
        let socket = dir.join("docker.sock");
        let state = Arc::new(FakeEngine::default());
        let app = Router::new()
            .route("/v1.43/_ping", get(|| async { "OK" }))
            .route(
                "/v1.43/networks/create",
                post(|| async { (StatusCode::CONFLICT, Json(json!({"message": "exists"}))) }),
            )
            .route(
                "/v1.43/containers/create",
                post(|State(s): State<Arc<FakeEngine>>, Json(body): Json<Value>| async move {
                    s.created.lock().push(body);
                    (StatusCode::CREATED, Json(json!({"Id": "c0ffee"})))
                }),
            )
            .route(
                "/v1.43/containers/{id}/start",
                post(|State(s): State<Arc<FakeEngine>>, Path(id): Path<String>| async move {
                    s.calls.lock().push(format!("start {id}"));
                    StatusCode::NO_CONTENT
                }),
            )
            .route(
                "/v1.43/containers/{id}/json",
                get(|| async {
                    Json(json!({"NetworkSettings": {"Networks": {SECRET_NETWORK: {"IPAddress": "172.30.0.2"}}}}))
                }),
            )
            .route(
                "/v1.43/containers/{id}/stats",
                get(|| async { Json(json!({"memory_stats": {"usage": 1073741824u64}})) }),
            )
            .route(
                "/v1.43/containers/{id}",
                delete(|Path(id): Path<String>| async move {
                    if id == "missing" {
                        StatusCode::NOT_FOUND
                    } else {
                        StatusCode::NO_CONTENT
                    }
                }),
            )
            .with_state(state.clone());
        let listener = tokio::net::UnixListener::bind(&socket).unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        (socket, state)
    }

    #[tokio::test]
    async fn speaks_the_engine_api() {
        let dir = tempfile::tempdir().unwrap();
        let (socket, fake) = fake_engine(dir.path()).await;
        let egress = Egress::new(false);
        let engine = DockerEngine::new(&socket, egress.clone());
        engine.ping().await.unwrap();
        let req = CreateRequest::replica("modelhub/stub:1", "/w", vec![], BTreeMap::new());
        let id = engine.create("r1", &req).await.unwrap();
        assert_eq!(id, "c0ffee");
        engine.start(&id).await.unwrap();
        assert_eq!(engine.endpoint(&id).await.unwrap(), "172.30.0.2:8000");
        assert_eq!(engine.stats(&id).await.unwrap().mem_bytes, 1 << 30);
        engine.remove(&id).await.unwrap();
        assert!(matches!(engine.remove("missing").await, Err(EngineError::NoSuchContainer(_))));

        let created = fake.created.lock();
        assert_eq!(created[0]["HostConfig"]["NetworkMode"], SECRET_NETWORK);
        let roundtrip: CreateRequest = serde_json::from_value(created[0].clone()).unwrap();
        assert!(roundtrip.is_isolated());
        assert_eq!(fake.calls.lock().as_slice(), ["start c0ffee"]);
        assert_eq!(egress.external_attempts(), 0);
    }

    #[tokio::test]
    async fn missing_socket_is_unavailable() {
        let engine = DockerEngine::new("/nonexistent/docker.sock", Egress::new(false));
        assert!(matches!(engine.ping().await, Err(EngineError::Unavailable(_))));
    }

    #[test]
    fn build_context_contains_dockerfile() {
        let spec = ImageSpec {
            tag: "modelhub/stub:abcd".into(),
            base: "modelhub/stub-base:latest".into(),
            labels: BTreeMap::from([("modelhub.weights".into(), "ff".into())]),
        };
        let bytes = build_context(&spec).unwrap();
        let mut archive = tar::Archive::new(bytes.as_slice());
        let mut entry = archive.entries().unwrap().next().unwrap().unwrap();
        let mut text = String::new();
        std::io::Read::read_to_string(&mut entry, &mut text).unwrap();
        assert!(text.starts_with("FROM modelhub/stub-base:latest\n"));
        assert!(text.contains("LABEL modelhub.weights=\"ff\""));
    }
}
