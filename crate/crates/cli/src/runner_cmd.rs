use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use urgentflow::machine::{parse_machine_configs, MachineConfig};
use urgentflow::runner::{
    concretise, execute_plan, parse_parameters, parse_workflow, ConcretePlan, ExecMode, ParameterSet, Provenance,
    RunReport, RunnerError,
};
use urgentflow::testbed::Testbed;

/// Machine-side workflow runner. Exits 1 when a step fails and 2 when the
/// inputs are rejected.
#[derive(Parser, Debug)]
#[command(name = "runner", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse and validate a workflow skeleton.
    Check {
        #[arg(long)]
        workflow: PathBuf,
    },
    /// Print the concrete plan as JSON without running anything.
    Plan {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Concretise and execute, with member commands run as local processes
    /// scheduled by the simulated batch system.
    Run {
        #[command(flatten)]
        inputs: Inputs,
        /// Directory for step outputs.
        #[arg(long)]
        workdir: PathBuf,
        /// Where to write the JSON run report (also written on failure).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Machine configuration file for the batch system; defaults to one
        /// machine sized from the plan.
        #[arg(long)]
        machine_config: Option<PathBuf>,
        /// Machine to use from `--machine-config` (default: the first).
        #[arg(long)]
        target: Option<String>,
    },
}

#[derive(Args, Debug)]
pub struct Inputs {
    #[arg(long)]
    pub workflow: PathBuf,
    /// Scenario parameter file (highest precedence).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Machine parameter file.
    #[arg(long)]
    pub machine: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Rejected(String),
    StepFailed(String),
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Rejected(format!("{}: {e}", path.display())))
}

fn at(path: &Path) -> impl Fn(RunnerError) -> Failure + '_ {
    move |e| Failure::Rejected(format!("{}: {e}", path.display()))
}

fn params(path: Option<&PathBuf>, prov: Provenance) -> Result<ParameterSet, Failure> {
    match path {
        Some(p) => parse_parameters(&read(p)?, prov).map_err(at(p)),
        None => Ok(ParameterSet::new(prov)),
    }
}

fn plan(inputs: &Inputs) -> Result<ConcretePlan, Failure> {
    let wf = parse_workflow(&read(&inputs.workflow)?).map_err(at(&inputs.workflow))?;
    let scenario = params(inputs.scenario.as_ref(), Provenance::Scenario)?;
    let machine = params(inputs.machine.as_ref(), Provenance::Machine)?;
    let plan = concretise(&wf, &scenario, &machine).map_err(|e| Failure::Rejected(e.to_string()))?;
    for key in &plan.unused_parameters {
        eprintln!("runner: warning: parameter `{key}` is not a workflow input");
    }
    Ok(plan)
}

fn machine_for(plan: &ConcretePlan, workdir: &Path, file: Option<&PathBuf>, target: Option<&str>) -> Result<MachineConfig, Failure> {
    let Some(path) = file else {
        let mut m = MachineConfig::new("local", 1024, workdir);
        if let Some(cpn) = plan.cores_per_node {
            m.cores_per_node = cpn;
        }
        return Ok(m);
    };
    let configs = parse_machine_configs(&read(path)?).map_err(|e| Failure::Rejected(format!("{}: {e}", path.display())))?;
    let m = match target {
        Some(t) => configs.into_iter().find(|m| m.machine_name == t),
        None => configs.into_iter().next(),
    }
    .ok_or_else(|| Failure::Rejected(format!("{}: no such machine", path.display())))?;
    if let Some(cpn) = plan.cores_per_node {
        if cpn != m.cores_per_node {
            return Err(Failure::Rejected(format!(
                "plan packs for {cpn} cores per node but {} has {}",
                m.machine_name, m.cores_per_node
            )));
        }
    }
    Ok(m)
}

fn write_report(report: &RunReport, path: Option<&PathBuf>) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, report.to_json() + "\n").map_err(|e| Failure::Rejected(format!("{}: {e}", p.display()))),
        None => Ok(()),
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Check { workflow } => {
            let wf = parse_workflow(&read(&workflow)?).map_err(at(&workflow))?;
            println!("{}: ok, {} inputs, {} steps", wf.workflow_id, wf.inputs.len(), wf.steps.len());
            Ok(())
        }
        Command::Plan { inputs } => {
            let plan = plan(&inputs)?;
            println!("{}", serde_json::to_string_pretty(&plan).expect("plan serializes"));
            Ok(())
        }
        Command::Run {
            inputs,
            workdir,
            report,
            machine_config,
            target,
        } => {
            let plan = plan(&inputs)?;
            fs::create_dir_all(&workdir).map_err(|e| Failure::Rejected(format!("{}: {e}", workdir.display())))?;
            let machine = machine_for(&plan, &workdir, machine_config.as_ref(), target.as_deref())?;
            let name = machine.machine_name.clone();
            let testbed = Arc::new(Testbed::new([machine]).map_err(|e| Failure::Rejected(e.to_string()))?);
            let connector = testbed.connector(&name).expect("machine registered");
            match execute_plan(&plan, &connector, &workdir, &ExecMode::Process) {
                Ok(r) => {
                    write_report(&r, report.as_ref())?;
                    for (name, path) in &r.outputs {
                        println!("{name}\t{}", path.display());
                    }
                    Ok(())
                }
                Err(RunnerError::StepFailed(f)) => {
                    write_report(&f.report, report.as_ref())?;
                    Err(Failure::StepFailed(RunnerError::StepFailed(f).to_string()))
                }
                Err(e) => Err(Failure::Rejected(e.to_string())),
            }
        }
    }
}

pub fn run(cli: Cli) -> ExitCode {
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::StepFailed(m)) => {
            eprintln!("runner: {m}");
            ExitCode::FAILURE
        }
        Err(Failure::Rejected(m)) => {
            eprintln!("runner: {m}");
            ExitCode::from(2)
        }
    }
}
