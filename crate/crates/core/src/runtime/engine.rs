//! The container-engine verbs the hub needs, modelled on the Docker Engine
//! API, and the create payload including the isolation network policy.

use std::collections::BTreeMap;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

/// Internal network replicas attach to. It is created without an outbound
/// route, so containers on it can only be reached from the gateway side.
pub const SECRET_NETWORK: &str = "modelhub-secret";
/// Port the model server listens on inside the container.
pub const REPLICA_PORT: u16 = 8000;
pub const MANAGED_LABEL: &str = "modelhub.managed";

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("container runtime unavailable: {0}")]
    Unavailable(String),
    #[error("image build failed: {0}")]
    BuildFailed(String),
    #[error("no such container {0}")]
    NoSuchContainer(String),
    #[error("engine request failed: {0}")]
    Request(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub tag: String,
    pub base: String,
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct PortBinding {
    pub host_ip: String,
    pub host_port: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct HostConfig {
    pub binds: Vec<String>,
    pub network_mode: String,
    pub port_bindings: BTreeMap<String, Vec<PortBinding>>,
    pub readonly_rootfs: bool,
    pub cap_drop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EndpointSettings {}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct NetworkingConfig {
    pub endpoints_config: BTreeMap<String, EndpointSettings>,
}

/// Body of `POST /containers/create`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct CreateRequest {
    pub image: String,
    pub env: Vec<String>,
    pub labels: BTreeMap<String, String>,
    pub exposed_ports: BTreeMap<String, serde_json::Value>,
    pub host_config: HostConfig,
    pub networking_config: NetworkingConfig,
}

impl CreateRequest {
    /// A replica container: weights mounted read-only, attached only to the
    /// secret network, its port published on loopback for the gateway.
    pub fn replica(image: &str, weights_dir: &str, env: Vec<String>, labels: BTreeMap<String, String>) -> Self {
        let port = format!("{REPLICA_PORT}/tcp");
        let mut labels = labels;
        labels.insert(MANAGED_LABEL.into(), "true".into());
        Self {
            image: image.to_owned(),
            env,
            labels,
            exposed_ports: BTreeMap::from([(port.clone(), serde_json::json!({}))]),
            host_config: HostConfig {
                binds: vec![format!("{weights_dir}:/weights:ro")],
                network_mode: SECRET_NETWORK.into(),
                port_bindings: BTreeMap::from([(
                    port,
                    vec![PortBinding {
                        host_ip: "127.0.0.1".into(),
                        host_port: String::new(),
                    }],
                )]),
                readonly_rootfs: true,
                cap_drop: vec!["ALL".into()],
            },
            networking_config: NetworkingConfig {
                endpoints_config: BTreeMap::from([(SECRET_NETWORK.into(), EndpointSettings {})]),
            },
        }
    }

    /// True when the container can reach nothing but the secret network and
    /// accepts connections only on loopback.
    pub fn is_isolated(&self) -> bool {
        self.host_config.network_mode == SECRET_NETWORK
            && self.networking_config.endpoints_config.len() == 1
            && self.networking_config.endpoints_config.contains_key(SECRET_NETWORK)
            && self
                .host_config
                .port_bindings
                .values()
                .flatten()
                .all(|b| b.host_ip == "127.0.0.1")
            && self.host_config.binds.iter().all(|b| b.ends_with(":ro"))
    }

    pub fn env_value(&self, key: &str) -> Option<&str> {
        self.env.iter().find_map(|kv| {
            kv.split_once('=')
                .filter(|(k, _)| *k == key)
                .map(|(_, v)| v)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainerStats {
    /// `None` when the engine reports no GPU for the container.
    pub gpu_util_pct: Option<f64>,
    pub mem_bytes: u64,
}

#[async_trait]
pub trait ContainerRuntime: Send + Sync {
    async fn ping(&self) -> Result<(), EngineError>;
    async fn build_image(&self, spec: &ImageSpec) -> Result<(), EngineError>;
    /// Creates a container and returns its id.
    async fn create(&self, name: &str, request: &CreateRequest) -> Result<String, EngineError>;
    async fn start(&self, id: &str) -> Result<(), EngineError>;
    /// `host:port` the gateway uses to reach the container's model server.
    async fn endpoint(&self, id: &str) -> Result<String, EngineError>;
    /// Stops the container; a zero grace period kills it outright.
    async fn stop(&self, id: &str, grace_secs: u64) -> Result<(), EngineError>;
    async fn remove(&self, id: &str) -> Result<(), EngineError>;
    async fn stats(&self, id: &str) -> Result<ContainerStats, EngineError>;
    /// Ids of every container the hub manages.
    async fn list(&self) -> Result<Vec<String>, EngineError>;
}
