//! HTTP service for the model hub: configuration loading, the JSON API and
//! a handle for graceful shutdown.

pub mod api;
pub mod config;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use modelhub_core::net::Egress;
use modelhub_core::runtime::docker::DockerEngine;
use modelhub_core::runtime::mock::MockRuntime;
use modelhub_core::runtime::ContainerRuntime;
use modelhub_core::{Hub, HubError};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use api::{router, AppState, ROUTES};
pub use config::{RuntimeKind, ServiceConfig};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("cannot parse configuration: {0}")]
    ConfigParse(String),
    #[error("cannot read {0}: {1}")]
    ConfigRead(PathBuf, #[source] std::io::Error),
    #[error("address in use: {0}")]
    AddrInUse(String),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A running service. Dropping it leaves the server running until the
/// runtime stops; call [`Server::shutdown`] to drain.
pub struct Server {
    addr: SocketAddr,
    hub: Arc<Hub>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    /// Stops accepting connections, lets in-flight requests finish, then
    /// drains every replica.
    pub async fn shutdown(mut self) -> Result<(), ServiceError> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.finish().await
    }

    /// Runs until interrupted with ctrl-c, then shuts down gracefully.
    pub async fn run_until_ctrl_c(mut self) -> Result<(), ServiceError> {
        tokio::signal::ctrl_c().await?;
        tracing::info!("shutting down");
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.finish().await
    }

    async fn finish(self) -> Result<(), ServiceError> {
        let served = self.task.await.map_err(std::io::Error::other)?;
        self.hub.shutdown().await;
        Ok(served?)
    }
}

/// Starts the service with the engine named in `config`.
pub async fn serve(config: ServiceConfig) -> Result<Server, ServiceError> {
    let egress = Egress::new(config.allow_outbound);
    let engine: Arc<dyn ContainerRuntime> = match &config.runtime {
        RuntimeKind::Mock => Arc::new(MockRuntime::new()),
        RuntimeKind::Engine(socket) => Arc::new(DockerEngine::new(socket.clone(), egress.clone())),
    };
    serve_with(config, engine, egress).await
}

/// Starts the service on an explicit engine and egress recorder.
pub async fn serve_with(
    config: ServiceConfig,
    engine: Arc<dyn ContainerRuntime>,
    egress: Arc<Egress>,
) -> Result<Server, ServiceError> {
    config.validate()?;
    let listener = match TcpListener::bind(&config.listen_addr).await {
        Ok(l) => l,
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => {
            return Err(ServiceError::AddrInUse(config.listen_addr.clone()))
        }
        Err(e) => return Err(e.into()),
    };
    let addr = listener.local_addr()?;
    let hub = Arc::new(Hub::open_with_egress(config.hub_config(), engine, Some(egress))?);
    hub.start_background();
    let app = router(AppState {
        hub: hub.clone(),
        clinician_id: config.clinician_id.clone(),
    });
    let (stop, stopped) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!(%addr, "modelhub service listening");
    Ok(Server {
        addr,
        hub,
        stop: Some(stop),
        task,
    })
}
