use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use urgentflow::bench::{
    check, csv_string, emit_csv, emit_summary, parse_counts, run_experiment, ExperimentConfig, RuntimeModel, Strategy,
};

/// Scaling benchmark against the simulated batch system. Exits 1 when a
/// structural check fails and 2 on bad arguments.
#[derive(Parser, Debug)]
#[command(name = "bench", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Time until the last job is queued: one job per member vs packed node jobs.
    Fig5 {
        #[command(flatten)]
        common: Common,
        /// Ensemble sizes, e.g. `16,32,...,2048`.
        #[arg(long = "n", default_value = "16,32,...,2048")]
        counts: String,
        /// Nodes on the machine (large so only submission cost matters).
        #[arg(long, default_value_t = 1_000_000)]
        nodes: u32,
    },
    /// Total runtime: MPI+scatter vs scatter only vs MPI only.
    Fig6 {
        #[command(flatten)]
        common: Common,
        #[arg(long = "n", default_value = "1,2,...,1024")]
        counts: String,
        #[arg(long, default_value_t = 1024)]
        nodes: u32,
        /// Member runtime model, `t1=..,f=..,beta=..`.
        #[arg(long, default_value_t = RuntimeModel::default())]
        model: RuntimeModel,
        /// Cores per member for the MPI strategies that pack members.
        #[arg(long, default_value_t = 8)]
        mpi_cores: u32,
    },
}

#[derive(Args, Debug)]
pub struct Common {
    /// Virtual seconds per submission attempt.
    #[arg(long, default_value_t = 1.0)]
    pub latency: f64,
    /// Virtual seconds between scheduler passes.
    #[arg(long, default_value_t = 1.0)]
    pub cycle: f64,
    /// Comma-separated subset of strategies to run.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<Strategy>,
    /// CSV destination; without it the CSV goes to stdout and the summary to stderr.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report check violations without failing.
    #[arg(long)]
    pub no_check: bool,
}

fn secs(v: f64, what: &str) -> Result<Duration, String> {
    if v.is_finite() && v >= 0.0 {
        Ok(Duration::from_secs_f64(v))
    } else {
        Err(format!("--{what} must be a non-negative number"))
    }
}

fn config(cmd: &Command) -> Result<(ExperimentConfig, &Common), String> {
    let (mut cfg, common, counts, nodes) = match cmd {
        Command::Fig5 { common, counts, nodes } => (ExperimentConfig::fig5(), common, counts, *nodes),
        Command::Fig6 {
            common,
            counts,
            nodes,
            model,
            mpi_cores,
        } => {
            let mut cfg = ExperimentConfig::fig6();
            cfg.runtime_model = *model;
            cfg.mpi_cores_per_member = *mpi_cores;
            (cfg, common, counts, *nodes)
        }
    };
    cfg.ensemble_counts = parse_counts(counts)?;
    cfg.machine.num_nodes = nodes;
    cfg = cfg.with_latency(secs(common.latency, "latency")?, secs(common.cycle, "cycle")?);
    if !common.strategies.is_empty() {
        cfg.strategies = common.strategies.clone();
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((cfg, common))
}

pub fn run(cli: Cli) -> ExitCode {
    let (cfg, common) = match config(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    let records = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    let summary = emit_summary(&records);
    let written = match &common.out {
        Some(path) => emit_csv(&records, path).map(|()| print!("{summary}")),
        None => csv_string(&records).map(|csv| {
            print!("{csv}");
            eprint!("{summary}");
        }),
    };
    if let Err(e) = written {
        eprintln!("bench: {e}");
        return ExitCode::from(2);
    }
    let _ = std::io::stdout().flush();
    let violations = check(&records, &cfg);
    for v in &violations {
        eprintln!("check failed: {v}");
    }
    if violations.is_empty() || common.no_check {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
