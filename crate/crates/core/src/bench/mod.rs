//! Ensemble scheduling experiments on the testbed.
//!
//! Fine-grained campaigns (one job per member) go through the workflow
//! engine and the simulation manager, so queue-full rejections land on the
//! deferred list. Packed campaigns go through the machine runner as a single
//! scattered plan. Everything runs on virtual time.

mod model;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use model::RuntimeModel;

use crate::engine::{Engine, EngineError, WorkflowKind, WorkflowStage};
use crate::machine::{ConnectorError, MachineConfig, RegistryError, WorkModel};
use crate::platform::{Platform, PlatformError};
use crate::runner::{
    concretise, execute_plan, parse_workflow, ExecMode, ParameterSet, Provenance, RawValue, RunnerError,
};
use crate::simulation::{SimulationError, SimulationRequest};
use crate::testbed::{LogKind, Testbed};

pub const CSV_HEADER: &str = "strategy,n,jobs,nodes,time_last_queued,total_runtime,deferred";

const ENSEMBLE_SKELETON: &str = "\
id: ensemble
inputs:
  members: array<int>
  cores_per_member: int
steps:
  ensemble:
    run: member {member}
    in:
      member: members
    walltime: \"99:00:00\"
    scatter:
      over: member
      cores_per_member: cores_per_member
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    FineGrained,
    Scatter,
    MpiScatter,
    ScatterOnly,
    MpiOnly,
}

impl Strategy {
    pub const FIG5: [Strategy; 2] = [Strategy::FineGrained, Strategy::Scatter];
    pub const FIG6: [Strategy; 3] = [Strategy::MpiScatter, Strategy::ScatterOnly, Strategy::MpiOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FineGrained => "FINE_GRAINED",
            Strategy::Scatter => "SCATTER",
            Strategy::MpiScatter => "MPI_SCATTER",
            Strategy::ScatterOnly => "SCATTER_ONLY",
            Strategy::MpiOnly => "MPI_ONLY",
        }
    }

    /// One job per member, submitted through the simulation manager.
    pub fn is_fine_grained(self) -> bool {
        matches!(self, Strategy::FineGrained | Strategy::MpiOnly)
    }

    pub fn cores_per_member(self, cfg: &ExperimentConfig) -> u32 {
        match self {
            Strategy::FineGrained | Strategy::Scatter | Strategy::ScatterOnly => 1,
            Strategy::MpiScatter => cfg.mpi_cores_per_member,
            Strategy::MpiOnly => cfg.machine.cores_per_node,
        }
    }

    /// Closed-form job count.
    pub fn expected_jobs(self, n: u64, cfg: &ExperimentConfig) -> u64 {
        if self.is_fine_grained() {
            n
        } else {
            let per_node = u64::from(cfg.machine.cores_per_node / self.cores_per_member(cfg));
            n.div_ceil(per_node)
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            Strategy::FineGrained,
            Strategy::Scatter,
            Strategy::MpiScatter,
            Strategy::ScatterOnly,
            Strategy::MpiOnly,
        ]
        .into_iter()
        .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    /// Time to the last job being queued; members complete instantly.
    Fig5,
    /// Total runtime with member runtimes from the model.
    Fig6,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub ensemble_counts: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub mpi_cores_per_member: u32,
    pub machine: MachineConfig,
    pub runtime_model: RuntimeModel,
}

impl ExperimentConfig {
    /// 16..=2048 doubling on an effectively unbounded node pool.
    pub fn fig5() -> Self {
        Self {
            experiment: Experiment::Fig5,
            ensemble_counts: doubling(16, 2048),
            strategies: Strategy::FIG5.to_vec(),
            mpi_cores_per_member: 8,
            machine: bench_machine(1_000_000),
            runtime_model: RuntimeModel::default(),
        }
    }

    /// 1..=1024 doubling on a 1024-node machine.
    pub fn fig6() -> Self {
        Self {
            experiment: Experiment::Fig6,
            ensemble_counts: doubling(1, 1024),
            strategies: Strategy::FIG6.to_vec(),
            mpi_cores_per_member: 8,
            machine: bench_machine(1024),
            runtime_model: RuntimeModel::default(),
        }
    }

    pub fn with_latency(mut self, submission_latency: Duration, scheduler_cycle: Duration) -> Self {
        self.machine.submission_latency = submission_latency;
        self.machine.scheduler_cycle = scheduler_cycle;
        self
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let cfg_err = |m: String| Err(BenchError::Config(m));
        if self.ensemble_counts.is_empty() || self.ensemble_counts.contains(&0) {
            return cfg_err("ensemble counts must be positive and non-empty".into());
        }
        if self.strategies.is_empty() {
            return cfg_err("no strategies selected".into());
        }
        let allowed: &[Strategy] = match self.experiment {
            Experiment::Fig5 => &Strategy::FIG5,
            Experiment::Fig6 => &Strategy::FIG6,
        };
        if let Some(s) = self.strategies.iter().find(|s| !allowed.contains(s)) {
            return cfg_err(format!("strategy {s} does not belong to this experiment"));
        }
        let cpn = self.machine.cores_per_node;
        if self.mpi_cores_per_member == 0 || self.mpi_cores_per_member > cpn {
            return cfg_err(format!(
                "MPI members need 1..={cpn} cores, got {}",
                self.mpi_cores_per_member
            ));
        }
        self.machine.validate().map_err(BenchError::Config)?;
        self.runtime_model.validate().map_err(BenchError::Config)
    }
}

/// `first, 2*first, ...` up to and including `last` when reachable.
pub fn doubling(first: u64, last: u64) -> Vec<u64> {
    std::iter::successors(Some(first.max(1)), |&n| n.checked_mul(2))
        .take_while(|&n| n <= last)
        .collect()
}

/// Parses `16,32,...,2048` (geometric fill between the last explicit terms)
/// or a plain list `1,5,9`.
pub fn parse_counts(s: &str) -> Result<Vec<u64>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    if parts.is_empty() {
        return Err("empty ensemble count list".into());
    }
    let num = |p: &str| p.parse::<u64>().ok().filter(|&v| v > 0).ok_or_else(|| format!("bad count `{p}`"));
    let Some(dots) = parts.iter().position(|p| *p == "...") else {
        return parts.iter().map(|p| num(p)).collect();
    };
    if dots < 2 || dots + 2 != parts.len() {
        return Err("`...` needs two terms before it and one after".into());
    }
    let head = parts[..dots].iter().map(|p| num(p)).collect::<Result<Vec<_>, _>>()?;
    let last = num(parts[dots + 1])?;
    let (a, b) = (head[dots - 2], head[dots - 1]);
    if b <= a || b % a != 0 {
        return Err(format!("cannot extend {a},{b} geometrically"));
    }
    let ratio = b / a;
    let mut out = head;
    let mut next = b.checked_mul(ratio);
    while let Some(v) = next.filter(|&v| v <= last) {
        out.push(v);
        next = v.checked_mul(ratio);
    }
    if out.last() != Some(&last) {
        return Err(format!("{last} is not reached by the sequence"));
    }
    Ok(out)
}

/// Default batch limits with unit latencies.
pub fn bench_machine(num_nodes: u32) -> MachineConfig {
    let mut m = MachineConfig::new("bench", num_nodes, std::env::temp_dir());
    m.submission_latency = Duration::from_secs(1);
    m.scheduler_cycle = Duration::from_secs(1);
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub n: u64,
    pub jobs_submitted: u64,
    pub nodes_used: u64,
    /// Virtual seconds until the final job entered the machine queue.
    pub time_last_queued: f64,
    /// Virtual seconds until the final member finished.
    pub total_runtime: f64,
    /// Submissions the machine turned away because its queue was full.
    pub rejections_deferred: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Runner(#[from] RunnerError),
    #[error(transparent)]
    Connector(#[from] ConnectorError),
    #[error("no records to write")]
    Empty,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn member_work(cfg: &ExperimentConfig, cores: u32) -> Duration {
    match cfg.experiment {
        Experiment::Fig5 => Duration::ZERO,
        Experiment::Fig6 => Duration::from_secs_f64(cfg.runtime_model.runtime(cores)),
    }
}

fn record(strategy: Strategy, n: u64, testbed: &Testbed, machine: &str) -> RunRecord {
    let jobs = testbed.jobs(machine);
    let secs = |d: Option<Duration>| d.map_or(0.0, |d| d.as_secs_f64());
    RunRecord {
        strategy,
        n,
        jobs_submitted: jobs.len() as u64,
        nodes_used: jobs.iter().map(|j| u64::from(j.nodes_requested)).sum(),
        time_last_queued: secs(jobs.iter().map(|j| j.submit_time).max()),
        total_runtime: secs(jobs.iter().filter_map(|j| j.end_time).max()),
        rejections_deferred: testbed
            .event_log()
            .iter()
            .filter(|r| r.kind == LogKind::Reject)
            .count() as u64,
    }
}

/// Run one strategy at one ensemble size on a fresh testbed.
pub fn run_one(cfg: &ExperimentConfig, strategy: Strategy, n: u64) -> Result<RunRecord, BenchError> {
    let scratch = tempfile::tempdir()?;
    let mut machine = cfg.machine.clone();
    machine.filesystem_root = scratch.path().join(&machine.machine_name);
    let cores = strategy.cores_per_member(cfg);
    let runtime = member_work(cfg, cores);
    if strategy.is_fine_grained() {
        one_job_per_member(machine, n, cores, runtime, strategy)
    } else {
        packed(machine, n, cores, runtime, strategy, scratch.path().join("run"))
    }
}

const FANOUT_QUEUE: &str = "fan_out";

fn one_job_per_member(
    machine: MachineConfig,
    n: u64,
    cores: u32,
    runtime: Duration,
    strategy: Strategy,
) -> Result<RunRecord, BenchError> {
    let name = machine.machine_name.clone();
    let engine = Engine::new();
    let work = if runtime.is_zero() {
        WorkModel::Noop
    } else {
        WorkModel::Synthetic(runtime)
    };
    engine.register_kind(WorkflowKind::new(
        "campaign",
        vec![WorkflowStage::new("fan_out", FANOUT_QUEUE, move |ctx| {
            let platform = ctx.service::<Platform>().ok_or("platform is gone")?;
            let count: u64 = serde_json::from_slice(&ctx.kv_get("members").unwrap_or_default())?;
            for _ in 0..count {
                let req = SimulationRequest::new(ctx.incident_id().clone(), cores, "99:00:00", "member.sh")
                    .description("ensemble member")
                    .work(work.clone());
                let sim = platform.simulations.create_simulation(req)?;
                platform.simulations.submit_simulation(&sim)?;
            }
            Ok(())
        })],
        FANOUT_QUEUE,
    ))?;
    let platform = Platform::new(Arc::clone(&engine), vec![machine])?;
    let incident = engine.create_incident(strategy.as_str(), "campaign")?;
    engine.kv_put(&incident, "members", serde_json::to_vec(&n).expect("u64 serializes"))?;
    engine.activate_incident(&incident)?;
    platform.run_until_idle()?;
    if let Some(rec) = engine
        .messages_for(&incident)
        .into_iter()
        .find(|r| matches!(r.status, crate::engine::MessageStatus::Failed { .. }))
    {
        return Err(BenchError::Config(format!("campaign stage failed: {:?}", rec.status)));
    }
    Ok(record(strategy, n, &platform.testbed, &name))
}

fn packed(
    machine: MachineConfig,
    n: u64,
    cores: u32,
    runtime: Duration,
    strategy: Strategy,
    workdir: PathBuf,
) -> Result<RunRecord, BenchError> {
    let name = machine.machine_name.clone();
    let cpn = machine.cores_per_node;
    let testbed = Arc::new(Testbed::new([machine])?);
    let connector = testbed.connector(&name).expect("machine exists");
    let skeleton = parse_workflow(ENSEMBLE_SKELETON)?;
    let mut scenario = ParameterSet::new(Provenance::Scenario);
    scenario.set("members", RawValue::list((0..n).map(|i| i.to_string())));
    scenario.set("cores_per_member", RawValue::scalar(cores.to_string()));
    let mut machine_params = ParameterSet::new(Provenance::Machine);
    machine_params.set(crate::runner::CORES_PER_NODE, RawValue::scalar(cpn.to_string()));
    let plan = concretise(&skeleton, &scenario, &machine_params)?;
    execute_plan(
        &plan,
        &connector,
        &workdir,
        &ExecMode::Modelled {
            member_runtime: runtime,
        },
    )?;
    testbed.run_until_idle()?;
    Ok(record(strategy, n, &testbed, &name))
}

/// Every configured strategy at every ensemble size, sorted.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>, BenchError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &s in &cfg.strategies {
        for &n in &cfg.ensemble_counts {
            out.push(run_one(cfg, s, n)?);
        }
    }
    sort_records(&mut out);
    Ok(out)
}

pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| a.strategy.cmp(&b.strategy).then(a.n.cmp(&b.n)));
}

fn by_strategy(records: &[RunRecord]) -> BTreeMap<Strategy, BTreeMap<u64, &RunRecord>> {
    let mut map: BTreeMap<Strategy, BTreeMap<u64, &RunRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.strategy).or_default().insert(r.n, r);
    }
    map
}

fn check_counts(records: &[RunRecord], cfg: &ExperimentConfig, out: &mut Vec<String>) {
    for r in records {
        let jobs = r.strategy.expected_jobs(r.n, cfg);
        if r.jobs_submitted != jobs {
            out.push(format!("{} N={}: {} jobs, expected {jobs}", r.strategy, r.n, r.jobs_submitted));
        }
        let nodes = jobs * u64::from(cfg.machine.nodes_for_cores(r.strategy.cores_per_member(cfg)));
        if r.nodes_used != nodes {
            out.push(format!("{} N={}: {} nodes, expected {nodes}", r.strategy, r.n, r.nodes_used));
        }
    }
}

/// Violations of the expected queue-time shape; empty when all hold.
pub fn check_fig5(records: &[RunRecord], cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    check_counts(records, cfg, &mut out);
    let map = by_strategy(records);
    let cpn = u64::from(cfg.machine.cores_per_node);
    if let Some(fine) = map.get(&Strategy::FineGrained) {
        let pts: Vec<_> = fine.values().collect();
        for w in pts.windows(2) {
            if w[1].time_last_queued <= w[0].time_last_queued {
                out.push(format!(
                    "FINE_GRAINED not increasing: N={} -> {}, N={} -> {}",
                    w[0].n, w[0].time_last_queued, w[1].n, w[1].time_last_queued
                ));
            }
        }
        if let (Some(a), Some(b)) = (fine.get(&64), fine.get(&128)) {
            if b.time_last_queued <= 2.0 * a.time_last_queued {
                out.push(format!(
                    "no jump past the queue cap: t(128)={} <= 2 * t(64)={}",
                    b.time_last_queued, a.time_last_queued
                ));
            }
        }
    }
    if let Some(scatter) = map.get(&Strategy::Scatter) {
        let unit = cfg.machine.submission_latency.as_secs_f64();
        for r in scatter.values() {
            let expect = r.n.div_ceil(cpn) as f64 * unit;
            if (r.time_last_queued - expect).abs() > 1e-6 * expect.max(1.0) {
                out.push(format!(
                    "SCATTER N={}: time_last_queued {} != ceil(N/{cpn}) * latency = {expect}",
                    r.n, r.time_last_queued
                ));
            }
        }
    }
    if let (Some(fine), Some(scatter)) = (map.get(&Strategy::FineGrained), map.get(&Strategy::Scatter)) {
        if let (Some(f), Some(s)) = (fine.get(&2048), scatter.get(&2048)) {
            if s.time_last_queued > 0.0 && f.time_last_queued / s.time_last_queued < 100.0 {
                out.push(format!(
                    "FINE/SCATTER at N=2048 is {:.2}, expected >= 100",
                    f.time_last_queued / s.time_last_queued
                ));
            }
        }
    }
    out
}

/// Violations of the expected runtime orderings; empty when all hold.
pub fn check_fig6(records: &[RunRecord], cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    check_counts(records, cfg, &mut out);
    let map = by_strategy(records);
    let Some(mpi_scatter) = map.get(&Strategy::MpiScatter) else {
        return out;
    };
    for (&n, base) in mpi_scatter {
        if let Some(s) = map.get(&Strategy::ScatterOnly).and_then(|m| m.get(&n)) {
            if s.total_runtime <= base.total_runtime {
                out.push(format!(
                    "N={n}: SCATTER_ONLY {} is not slower than MPI_SCATTER {}",
                    s.total_runtime, base.total_runtime
                ));
            }
        }
        if let Some(m) = map.get(&Strategy::MpiOnly).and_then(|m| m.get(&n)) {
            if n <= 16 && m.total_runtime >= base.total_runtime {
                out.push(format!(
                    "N={n}: MPI_ONLY {} is not faster than MPI_SCATTER {}",
                    m.total_runtime, base.total_runtime
                ));
            }
            if n >= 128 && m.total_runtime <= base.total_runtime {
                out.push(format!(
                    "N={n}: MPI_ONLY {} is not slower than MPI_SCATTER {}",
                    m.total_runtime, base.total_runtime
                ));
            }
        }
    }
    out
}

pub fn check(records: &[RunRecord], cfg: &ExperimentConfig) -> Vec<String> {
    match cfg.experiment {
        Experiment::Fig5 => check_fig5(records, cfg),
        Experiment::Fig6 => check_fig6(records, cfg),
    }
}

pub fn csv_string(records: &[RunRecord]) -> Result<String, BenchError> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

pub fn write_csv<W: Write>(records: &[RunRecord], out: W) -> Result<(), BenchError> {
    if records.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| BenchError::Io(e.into());
    w.write_record(CSV_HEADER.split(',')).map_err(io)?;
    for r in &sorted {
        w.write_record([
            r.strategy.as_str().to_string(),
            r.n.to_string(),
            r.jobs_submitted.to_string(),
            r.nodes_used.to_string(),
            format!("{:.6}", r.time_last_queued),
            format!("{:.6}", r.total_runtime),
            r.rejections_deferred.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Write the CSV to `path`; nothing is created when `records` is empty.
pub fn emit_csv(records: &[RunRecord], path: &std::path::Path) -> Result<(), BenchError> {
    let text = csv_string(records)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Fixed-width text table.
pub fn emit_summary(records: &[RunRecord]) -> String {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut s = format!(
        "{:<13} {:>6} {:>6} {:>6} {:>14} {:>14} {:>8}\n",
        "strategy", "n", "jobs", "nodes", "last_queued_s", "runtime_s", "deferred"
    );
    for r in &sorted {
        let _ = writeln!(
            s,
            "{:<13} {:>6} {:>6} {:>6} {:>14.3} {:>14.3} {:>8}",
            r.strategy.as_str(),
            r.n,
            r.jobs_submitted,
            r.nodes_used,
            r.time_last_queued,
            r.total_runtime,
            r.rejections_deferred
        );
    }
    s
}
