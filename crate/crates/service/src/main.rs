use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use modelhub_service::{serve, ServiceConfig};

/// On-premise model hub service.
#[derive(Debug, Parser)]
#[command(name = "modelhub-server", version)]
struct Args {
    /// TOML configuration file; `MODELHUB_*` variables override it.
    #[arg(long, env = "MODELHUB_CONFIG")]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    let result = async {
        let config = ServiceConfig::load(args.config.as_deref(), std::env::vars())?;
        serve(config).await?.run_until_ctrl_c().await
    }
    .await;
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("modelhub-server: {e}");
            ExitCode::FAILURE
        }
    }
}
