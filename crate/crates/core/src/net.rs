//! Egress control for every outbound connection the hub opens.
//!
//! All HTTP traffic leaving the process goes through [`Egress`], which
//! classifies the destination, records the attempt, and refuses external
//! destinations unless outbound access is enabled. Loopback and hosts the
//! runtime registers as belonging to the isolated container network are
//! always permitted.

use std::collections::HashSet;
use std::net::IpAddr;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use url::{Host, Url};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Destination {
    Loopback,
    /// A replica on the isolated container network, or the runtime socket.
    Internal,
    External,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConnectAttempt {
    pub target: String,
    pub destination: Destination,
    pub allowed: bool,
}

#[derive(Debug, thiserror::Error)]
#[error("outbound connection to {0} refused by isolation policy")]
pub struct EgressDenied(pub String);

#[derive(Debug)]
pub struct Egress {
    allow_outbound: bool,
    internal_hosts: Mutex<HashSet<String>>,
    attempts: Mutex<Vec<ConnectAttempt>>,
}

impl Egress {
    pub fn new(allow_outbound: bool) -> Arc<Self> {
        Arc::new(Self {
            allow_outbound,
            internal_hosts: Mutex::new(HashSet::new()),
            attempts: Mutex::new(Vec::new()),
        })
    }

    pub fn allow_outbound(&self) -> bool {
        self.allow_outbound
    }

    /// Marks a host as part of the isolated container network.
    pub fn register_internal_host(&self, host: &str) {
        self.internal_hosts.lock().insert(host.to_owned());
    }

    pub fn classify(&self, url: &Url) -> Destination {
        match url.host() {
            Some(Host::Ipv4(ip)) => self.classify_ip(IpAddr::V4(ip), &ip.to_string()),
            Some(Host::Ipv6(ip)) => self.classify_ip(IpAddr::V6(ip), &ip.to_string()),
            Some(Host::Domain(name)) => {
                if name.eq_ignore_ascii_case("localhost") {
                    Destination::Loopback
                } else if self.internal_hosts.lock().contains(name) {
                    Destination::Internal
                } else {
                    Destination::External
                }
            }
            None => Destination::External,
        }
    }

    fn classify_ip(&self, ip: IpAddr, text: &str) -> Destination {
        if ip.is_loopback() {
            Destination::Loopback
        } else if self.internal_hosts.lock().contains(text) {
            Destination::Internal
        } else {
            Destination::External
        }
    }

    /// Records the attempt and decides whether it may proceed.
    pub fn check(&self, url: &Url) -> Result<Destination, EgressDenied> {
        let destination = self.classify(url);
        let allowed = destination != Destination::External || self.allow_outbound;
        let target = match (url.host_str(), url.port_or_known_default()) {
            (Some(h), Some(p)) => format!("{h}:{p}"),
            (Some(h), None) => h.to_owned(),
            _ => url.as_str().to_owned(),
        };
        self.attempts.lock().push(ConnectAttempt {
            target: target.clone(),
            destination,
            allowed,
        });
        if allowed {
            Ok(destination)
        } else {
            Err(EgressDenied(target))
        }
    }

    /// Records a connection to a local unix socket (the container engine).
    pub fn record_socket(&self, path: &str) {
        self.attempts.lock().push(ConnectAttempt {
            target: format!("unix:{path}"),
            destination: Destination::Internal,
            allowed: true,
        });
    }

    pub fn attempts(&self) -> Vec<ConnectAttempt> {
        self.attempts.lock().clone()
    }

    pub fn external_attempts(&self) -> usize {
        self.attempts
            .lock()
            .iter()
            .filter(|a| a.destination == Destination::External)
            .count()
    }
}

/// An HTTP client that routes every request through an [`Egress`] check.
#[derive(Debug, Clone)]
pub struct HttpClient {
    inner: reqwest::Client,
    /// Never reuses connections, so a probe always sees the live socket.
    fresh: reqwest::Client,
    egress: Arc<Egress>,
}

impl HttpClient {
    pub fn new(egress: Arc<Egress>) -> Self {
        let inner = reqwest::Client::builder()
            .no_proxy()
            .build()
            .expect("http client construction");
        let fresh = reqwest::Client::builder()
            .no_proxy()
            .pool_max_idle_per_host(0)
            .build()
            .expect("http client construction");
        Self { inner, fresh, egress }
    }

    pub fn egress(&self) -> &Arc<Egress> {
        &self.egress
    }

    pub fn request(
        &self,
        method: reqwest::Method,
        url: &str,
    ) -> Result<reqwest::RequestBuilder, EgressDenied> {
        let parsed = Url::parse(url).map_err(|_| EgressDenied(url.to_owned()))?;
        self.egress.check(&parsed)?;
        Ok(self.inner.request(method, parsed))
    }

    /// A GET on a dedicated connection, for health probes.
    pub fn probe(&self, url: &str) -> Result<reqwest::RequestBuilder, EgressDenied> {
        let parsed = Url::parse(url).map_err(|_| EgressDenied(url.to_owned()))?;
        self.egress.check(&parsed)?;
        Ok(self.fresh.get(parsed))
    }

    pub fn get(&self, url: &str) -> Result<reqwest::RequestBuilder, EgressDenied> {
        self.request(reqwest::Method::GET, url)
    }

    pub fn post(&self, url: &str) -> Result<reqwest::RequestBuilder, EgressDenied> {
        self.request(reqwest::Method::POST, url)
    }
}
