//! Echo model server baked into `stub` profile images. Listens on
//! `STUB_BIND` (default `0.0.0.0:8000`) until interrupted.

use std::net::SocketAddr;

use modelhub_core::runtime::stub::{StubConfig, StubServer};

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let vars: Vec<(String, String)> = std::env::vars().collect();
    let config = StubConfig::from_env(vars.iter().map(|(k, v)| (k.as_str(), v.as_str())));
    let bind: SocketAddr = std::env::var("STUB_BIND")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| SocketAddr::from(([0, 0, 0, 0], 8000)));
    let server = StubServer::spawn(config, bind).await?;
    eprintln!("modelhub-stub listening on {}", server.addr());
    tokio::signal::ctrl_c().await?;
    Ok(())
}
