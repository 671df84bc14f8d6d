use clap::Parser;
use urgentflow_cli::bench_cmd::{run, Cli};

fn main() -> std::process::ExitCode {
    urgentflow_cli::init_logging();
    run(Cli::parse())
}
