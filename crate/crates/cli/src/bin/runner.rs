use clap::Parser;
use urgentflow_cli::runner_cmd::{run, Cli};

fn main() -> std::process::ExitCode {
    urgentflow_cli::init_logging();
    run(Cli::parse())
}
