//! Argument handling for the `bench` and `runner` binaries.

pub mod bench_cmd;
pub mod runner_cmd;

/// Installs a stderr logger honouring `RUST_LOG` (default: warnings).
pub fn init_logging() {
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .try_init();
}
