use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use tapid_core::Registry;
use tapid_service::{router, AppState, ServiceConfig, DEFAULT_STREAM_HZ};

/// Local control service for tapid sessions.
///
/// Listens on loopback only unless told otherwise. There is no
/// authentication: binding to a non-loopback address lets anyone who can
/// reach it drive captures and read results. Do not do that.
#[derive(Debug, Parser)]
#[command(name = "tapid-service", version)]
struct Args {
    /// Address to listen on. Non-loopback addresses are unsafe (see above).
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: SocketAddr,
    /// Directory for audit logs of sessions that do not name a file.
    #[arg(long, default_value = ".")]
    audit_dir: PathBuf,
    /// Default rate of the live counter stream, in snapshots per second.
    #[arg(long, default_value_t = DEFAULT_STREAM_HZ)]
    stream_hz: f64,
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    if !args.bind.ip().is_loopback() {
        tracing::warn!(bind = %args.bind, "listening on a non-loopback address without authentication");
    }
    let state = AppState::new(
        Registry::with_defaults(),
        ServiceConfig {
            audit_dir: args.audit_dir,
            stream_hz: args.stream_hz,
        },
    );
    let listener = match tokio::net::TcpListener::bind(args.bind).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("tapid-service: cannot listen on {}: {e}", args.bind);
            std::process::exit(2);
        }
    };
    tracing::info!(addr = %args.bind, "listening");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    if let Err(e) = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
    {
        eprintln!("tapid-service: {e}");
        std::process::exit(4);
    }
}
