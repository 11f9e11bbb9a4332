use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use vitl_cli::server::Service;
use vitl_core::catalog::parse_seed;
use vitl_core::config::ServiceConfig;
use vitl_core::time::SystemClock;

#[derive(Debug, Parser)]
#[command(name = "vitld", about = "Run the vitl lab service")]
struct Args {
    /// TOML configuration file.
    #[arg(long, env = "VITL_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides `listen_address`.
    #[arg(long)]
    listen: Option<String>,
    /// Catalog seed (one JSON image per line) loaded at startup.
    #[arg(long)]
    seed_catalog: Option<PathBuf>,
}

fn fail(msg: impl std::fmt::Display) -> ! {
    eprintln!("vitld: {msg}");
    std::process::exit(1);
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let args = Args::parse();
    let mut config = match &args.config {
        Some(path) => ServiceConfig::load(path).unwrap_or_else(|e| fail(e)),
        None => ServiceConfig::default(),
    };
    if let Some(listen) = args.listen {
        config.listen_address = listen;
    }
    let svc = Service::new(config, Arc::new(SystemClock)).unwrap_or_else(|e| fail(e));
    if let Some(path) = &args.seed_catalog {
        let text = std::fs::read_to_string(path)
            .unwrap_or_else(|e| fail(format!("{}: {e}", path.display())));
        let images = parse_seed(&text).unwrap_or_else(|e| fail(e));
        let fresh: Vec<_> = images
            .into_iter()
            .filter(|i| svc.catalog().lookup(i.vm_id).is_none())
            .collect();
        match svc.seed_images(fresh) {
            Ok(n) => tracing::info!("seeded {n} images"),
            Err(e) => fail(format!("seeding catalog: {}", e.code())),
        }
    }
    let listener = tokio::net::TcpListener::bind(&svc.config().listen_address)
        .await
        .unwrap_or_else(|e| fail(format!("{}: {e}", svc.config().listen_address)));
    tracing::info!("listening on {}", svc.config().listen_address);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    };
    if let Err(e) = vitl_cli::server::serve(svc, listener, shutdown).await {
        fail(e);
    }
}
