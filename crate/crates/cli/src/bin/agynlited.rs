//! Runs the control plane and serves the gateway over HTTP.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use agynlite::gateway::http::HttpServer;
use agynlite::gateway::UserTable;
use agynlite::identity::PROVISION_TOKEN_ENV;
use agynlite::platform::{Platform, PlatformConfig};
use agynlite::registry::MASTER_KEY_ENV;
use clap::Parser;

#[derive(Parser)]
#[command(name = "agynlited", version, about = "agynlite control plane")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7420")]
    listen: String,
    /// State directory (store log and snapshot).
    #[arg(long, default_value = "./agynlite-data")]
    data_dir: PathBuf,
    /// Volumes and container scratch. Defaults to `<data-dir>/runner`.
    #[arg(long)]
    runner_root: Option<PathBuf>,
    /// `users.json` with bearer tokens.
    #[arg(long)]
    users: PathBuf,
    /// Static console build served under /console/.
    #[arg(long)]
    console_dir: Option<PathBuf>,
    /// Orchestrator sweep period in ms (default: min idle timeout / 10).
    #[arg(long)]
    sweep_ms: Option<u64>,
    /// fsync every store append.
    #[arg(long)]
    sync: bool,
}

fn master_key() -> Result<[u8; 32], String> {
    let hex_key = std::env::var(MASTER_KEY_ENV).map_err(|_| format!("{MASTER_KEY_ENV} is not set"))?;
    hex::decode(hex_key.trim())
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| format!("{MASTER_KEY_ENV} must be 64 hex characters"))
}

fn run(args: Args) -> Result<(), String> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_target(false)
        .init();
    let key = master_key()?;
    let users = UserTable::load(&args.users).map_err(|e| format!("{}: {e}", args.users.display()))?;
    let runner_root = args.runner_root.unwrap_or_else(|| args.data_dir.join("runner"));
    let mut cfg = PlatformConfig::new(runner_root, key, users);
    cfg.data_dir = Some(args.data_dir.join("store"));
    cfg.provision_token = std::env::var(PROVISION_TOKEN_ENV).unwrap_or_default();
    cfg.store.sync = args.sync;
    cfg.orchestrator.sweep_period = args.sweep_ms.map(Duration::from_millis);
    let platform = Platform::start(cfg).map_err(|e| e.to_string())?;
    let server = HttpServer::start_with_console(platform.gateway().clone(), &args.listen, args.console_dir)
        .map_err(|e| format!("listen {}: {e}", args.listen))?;
    println!("agynlited listening on {}", server.base_url());
    server.wait();
    platform.shutdown();
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("agynlited: {e}");
            ExitCode::from(1)
        }
    }
}
