use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use tracing::{error, info};
use urgentflow::engine::Engine;
use urgentflow::machine::parse_machine_configs;
use urgentflow::platform::Platform;
use urgentflow_service::handlers::builtin_handlers;
use urgentflow_service::sources::{spawn_poller, wall_clock, FileFetcher, SourceRegistry};
use urgentflow_service::{openapi, router, AppState};

/// Serve the incident API over HTTP.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Machine configuration file for the simulated testbed.
    #[arg(long)]
    machines: Option<PathBuf>,
    /// Kind manifest; may be given more than once. Handler symbols: noop, record, fail.
    #[arg(long)]
    manifest: Vec<PathBuf>,
    /// Engine store file. Without it state is kept in memory only.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Require this value in the x-api-key header.
    #[arg(long, env = "URGENTFLOW_API_KEY")]
    api_key: Option<String>,
    /// Engine dispatcher threads.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Virtual testbed seconds per wall-clock second.
    #[arg(long, default_value_t = 1.0)]
    clock_speed: f64,
    /// Seconds between data-source poll passes.
    #[arg(long, default_value_t = 1.0)]
    poll_tick: f64,
    /// Print the OpenAPI document and exit.
    #[arg(long)]
    print_openapi: bool,
}

fn read(path: &PathBuf) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    if args.print_openapi {
        print!("{}", openapi::pretty());
        return ExitCode::SUCCESS;
    }
    match serve(args).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}

async fn serve(args: Args) -> Result<(), String> {
    if !(args.clock_speed.is_finite() && args.clock_speed > 0.0) {
        return Err("--clock-speed must be positive".into());
    }
    if !(args.poll_tick.is_finite() && args.poll_tick > 0.0) {
        return Err("--poll-tick must be positive".into());
    }
    let mut builder = Engine::builder();
    if let Some(store) = &args.store {
        builder = builder.store(store);
    }
    let engine = builder.build().map_err(|e| e.to_string())?;
    let handlers = builtin_handlers();
    for path in &args.manifest {
        let kinds = engine
            .register_manifest(&read(path)?, &handlers)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        info!(manifest = %path.display(), ?kinds, "registered workflow kinds");
    }
    let machines = match &args.machines {
        Some(p) => parse_machine_configs(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?,
        None => Vec::new(),
    };
    let platform = Platform::new(engine, machines).map_err(|e| e.to_string())?;
    let _clock = platform
        .testbed
        .spawn_wall_clock(args.clock_speed, Duration::from_millis(50));
    let workers = platform.engine.start_workers(args.workers.max(1));

    let sources = Arc::new(SourceRegistry::new(Arc::clone(&platform.engine), Box::<FileFetcher>::default()));
    let clock = wall_clock();
    let poller = spawn_poller(Arc::clone(&sources), Arc::clone(&clock), Duration::from_secs_f64(args.poll_tick));
    let app = router(AppState {
        platform: Arc::clone(&platform),
        sources,
        clock,
        api_key: args.api_key.clone(),
    });

    let listener = tokio::net::TcpListener::bind(&args.bind)
        .await
        .map_err(|e| format!("bind {}: {e}", args.bind))?;
    info!(addr = %args.bind, "listening");
    let served = axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string());
    poller.abort();
    tokio::task::spawn_blocking(move || workers.shutdown())
        .await
        .map_err(|e| e.to_string())?;
    served
}
