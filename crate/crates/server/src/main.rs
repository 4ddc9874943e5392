use anyhow::{Context, Result};
use clap::Parser;

#[derive(Parser)]
#[command(name = "tocom-server", version, about = "Serve the tocom HTTP API")]
struct Args {
    /// Address to listen on.
    #[arg(long, env = "TOCOM_LISTEN", default_value = "127.0.0.1:8377")]
    listen: String,
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let listener = tokio::net::TcpListener::bind(&args.listen)
        .await
        .with_context(|| format!("cannot listen on {}", args.listen))?;
    tracing::info!("listening on {}", listener.local_addr()?);
    tocom_server::serve(listener).await.context("server failed")
}
