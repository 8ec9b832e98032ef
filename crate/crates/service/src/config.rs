//! Service configuration: a TOML file overlaid with `MODELHUB_*`
//! environment variables.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use modelhub_core::gateway::{BatchPolicy, GatewayConfig, ScalePolicy};
use modelhub_core::runtime::RuntimeConfig;
use modelhub_core::HubConfig;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const ENV_PREFIX: &str = "MODELHUB_";

/// Which container engine backs the runtime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuntimeKind {
    /// In-process engine; replicas are stub servers on loopback.
    Mock,
    /// Docker-compatible engine API on a unix socket.
    Engine(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen_addr: String,
    /// Registry journal and snapshot, score journal and `audit.log`.
    pub data_dir: PathBuf,
    pub blob_root: PathBuf,
    pub runtime: RuntimeKind,
    pub runtime_profile: String,
    pub allow_outbound: bool,
    pub hub_base_url: String,
    /// Scores submitted without a clinician id are attributed to this one.
    pub clinician_id: String,
    pub operator: String,
    pub seed_fixtures: bool,
    pub batch: BatchPolicy,
    pub scale: ScalePolicy,
    pub autoscale_interval_ms: u64,
    pub telemetry_interval_ms: u64,
    pub health_interval_ms: u64,
    pub startup_timeout_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let runtime = RuntimeConfig::default();
        Self {
            listen_addr: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("modelhub-data"),
            blob_root: PathBuf::from("modelhub-data/blobs"),
            runtime: RuntimeKind::Engine(PathBuf::from("/var/run/docker.sock")),
            runtime_profile: "stub".into(),
            allow_outbound: false,
            hub_base_url: "https://huggingface.co".into(),
            clinician_id: "clinician".into(),
            operator: "operator".into(),
            seed_fixtures: false,
            batch: BatchPolicy::default(),
            scale: ScalePolicy::default(),
            autoscale_interval_ms: 1000,
            telemetry_interval_ms: 1000,
            health_interval_ms: runtime.health_interval.as_millis() as u64,
            startup_timeout_ms: runtime.startup_timeout.as_millis() as u64,
        }
    }
}

/// Keys whose environment value is always taken as a string.
const STRING_KEYS: &[&str] = &[
    "listen_addr",
    "data_dir",
    "blob_root",
    "runtime_profile",
    "hub_base_url",
    "clinician_id",
    "operator",
];
const OTHER_KEYS: &[&str] = &[
    "allow_outbound",
    "seed_fixtures",
    "autoscale_interval_ms",
    "telemetry_interval_ms",
    "health_interval_ms",
    "startup_timeout_ms",
];
const SECTIONS: &[&str] = &["batch", "scale"];

impl ServiceConfig {
    /// Reads `path` (if any), applies `MODELHUB_*` overrides from `env`
    /// and validates the result.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ServiceError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| ServiceError::ConfigRead(p.to_owned(), e))?,
            None => String::new(),
        };
        Self::from_toml(&text, env)
    }

    pub fn from_toml(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ServiceError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ServiceError::ConfigParse(e.to_string()))?;
        for (key, value) in env {
            let Some(key) = key.strip_prefix(ENV_PREFIX) else { continue };
            apply_env(&mut table, &key.to_ascii_lowercase(), &value)?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ServiceError::ConfigParse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let invalid = |field: &str| Err(ServiceError::ConfigInvalid(field.to_owned()));
        if self.listen_addr.parse::<SocketAddr>().is_err() {
            return invalid("listen_addr");
        }
        if self.blob_root == self.data_dir {
            return invalid("blob_root");
        }
        if self.batch.max_batch == 0 {
            return invalid("batch.max_batch");
        }
        if let Err(field) = self.scale.validate() {
            return invalid(&format!("scale.{field}"));
        }
        if self.autoscale_interval_ms == 0 {
            return invalid("autoscale_interval_ms");
        }
        if self.telemetry_interval_ms == 0 {
            return invalid("telemetry_interval_ms");
        }
        if let RuntimeKind::Engine(socket) = &self.runtime {
            if socket.as_os_str().is_empty() {
                return invalid("runtime");
            }
        }
        Ok(())
    }

    pub fn hub_config(&self) -> HubConfig {
        HubConfig {
            data_dir: Some(self.data_dir.clone()),
            blob_root: self.blob_root.clone(),
            allow_outbound: self.allow_outbound,
            hub_base_url: self.hub_base_url.clone(),
            runtime_profile: self.runtime_profile.clone(),
            runtime: RuntimeConfig {
                health_interval: Duration::from_millis(self.health_interval_ms),
                startup_timeout: Duration::from_millis(self.startup_timeout_ms),
                ..RuntimeConfig::default()
            },
            gateway: GatewayConfig {
                batch: self.batch,
                scale: self.scale,
                autoscale_interval: Duration::from_millis(self.autoscale_interval_ms),
                ..GatewayConfig::default()
            },
            telemetry_interval: Duration::from_millis(self.telemetry_interval_ms),
            operator: self.operator.clone(),
            seed_fixtures: self.seed_fixtures,
            ..HubConfig::default()
        }
    }
}

/// Maps `runtime`, top-level keys and `batch_*`/`scale_*` keys into the
/// table. Unrelated `MODELHUB_*` variables (the CLI's `MODELHUB_URL`) are
/// ignored.
fn apply_env(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ServiceError> {
    if key == "runtime" {
        let runtime = match value.split_once(':') {
            _ if value == "mock" => toml::Value::String("mock".into()),
            Some(("engine", socket)) => {
                let mut t = toml::Table::new();
                t.insert("engine".into(), toml::Value::String(socket.into()));
                toml::Value::Table(t)
            }
            _ => return Err(ServiceError::ConfigInvalid("runtime".into())),
        };
        table.insert(key.into(), runtime);
        return Ok(());
    }
    if STRING_KEYS.contains(&key) {
        table.insert(key.into(), toml::Value::String(value.into()));
        return Ok(());
    }
    if OTHER_KEYS.contains(&key) {
        table.insert(key.into(), scalar(key, value)?);
        return Ok(());
    }
    for section in SECTIONS {
        if let Some(field) = key.strip_prefix(section).and_then(|k| k.strip_prefix('_')) {
            let dotted = format!("{section}.{field}");
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(inner) = entry else {
                return Err(ServiceError::ConfigInvalid(section.to_string()));
            };
            inner.insert(field.into(), scalar(&dotted, value)?);
        }
    }
    Ok(())
}

fn scalar(field: &str, value: &str) -> Result<toml::Value, ServiceError> {
    if let Ok(b) = value.parse::<bool>() {
        Ok(toml::Value::Boolean(b))
    } else if let Ok(i) = value.parse::<i64>() {
        Ok(toml::Value::Integer(i))
    } else if let Ok(f) = value.parse::<f64>() {
        Ok(toml::Value::Float(f))
    } else {
        Err(ServiceError::ConfigInvalid(field.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_valid() {
        let c = ServiceConfig::from_toml("", []).unwrap();
        assert_eq!(c, ServiceConfig::default());
    }

    #[test]
    fn toml_and_env_overlay() {
        let text = r#"
            listen_addr = "127.0.0.1:9000"
            runtime = "mock"
            [scale]
            min_replicas = 1
            max_replicas = 2
            q_hi = 4.0
            q_lo = 0.5
            sustain_ms = 3000
            cooldown_ms = 10000
        "#;
        let c = ServiceConfig::from_toml(
            text,
            env(&[
                ("MODELHUB_SCALE_MAX_REPLICAS", "3"),
                ("MODELHUB_BATCH_MAX_BATCH", "4"),
                ("MODELHUB_ALLOW_OUTBOUND", "true"),
                ("MODELHUB_CLINICIAN_ID", "dr-a"),
                ("MODELHUB_URL", "http://ignored"),
                ("PATH", "/bin"),
            ]),
        )
        .unwrap();
        assert_eq!(c.listen_addr, "127.0.0.1:9000");
        assert_eq!(c.runtime, RuntimeKind::Mock);
        assert_eq!(c.scale.max_replicas, 3);
        assert_eq!(c.batch.max_batch, 4);
        assert_eq!(c.batch.window_ms, 50);
        assert!(c.allow_outbound);
        assert_eq!(c.clinician_id, "dr-a");
    }

    #[test]
    fn engine_runtime_forms() {
        let c = ServiceConfig::from_toml("runtime = { engine = \"/run/docker.sock\" }", []).unwrap();
        assert_eq!(c.runtime, RuntimeKind::Engine("/run/docker.sock".into()));
        let c = ServiceConfig::from_toml("", env(&[("MODELHUB_RUNTIME", "engine:/tmp/e.sock")])).unwrap();
        assert_eq!(c.runtime, RuntimeKind::Engine("/tmp/e.sock".into()));
        let c = ServiceConfig::from_toml("", env(&[("MODELHUB_RUNTIME", "mock")])).unwrap();
        assert_eq!(c.runtime, RuntimeKind::Mock);
    }

    #[test]
    fn invalid_fields_are_named() {
        let field = |text: &str, e: &[(&str, &str)]| match ServiceConfig::from_toml(text, env(e)) {
            Err(ServiceError::ConfigInvalid(f)) => f,
            other => panic!("expected ConfigInvalid, got {other:?}"),
        };
        assert_eq!(field("", &[("MODELHUB_SCALE_Q_LO", "5.0")]), "scale.q_lo");
        assert_eq!(field("", &[("MODELHUB_SCALE_MIN_REPLICAS", "9")]), "scale.min_replicas");
        assert_eq!(field("listen_addr = \"nowhere\"", &[]), "listen_addr");
        assert_eq!(field("data_dir = \"d\"\nblob_root = \"d\"", &[]), "blob_root");
        assert_eq!(field("", &[("MODELHUB_BATCH_MAX_BATCH", "0")]), "batch.max_batch");
        assert_eq!(field("", &[("MODELHUB_RUNTIME", "podman")]), "runtime");
        assert_eq!(field("", &[("MODELHUB_SCALE_Q_HI", "high")]), "scale.q_hi");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ServiceConfig::from_toml("listen = \"x\"", []),
            Err(ServiceError::ConfigParse(_))
        ));
    }
}
