//! Machines as seen by the marshalling tier: static configuration, the
//! sandboxed filesystem view, and the connector interface through which
//! jobs are submitted. The simulated batch system in [`crate::testbed`] is
//! the only connector implementation shipped here.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::ids::JobId;
use crate::syntax::{self, Node, Pos, SyntaxError};

pub const DEFAULT_CORES_PER_NODE: u32 = 128;
pub const DEFAULT_MAX_JOBS_IN_SYSTEM: u32 = 64;
pub const DEFAULT_MAX_RUNNING_JOBS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub machine_name: String,
    pub num_nodes: u32,
    pub cores_per_node: u32,
    pub max_jobs_in_system: u32,
    pub max_running_jobs: u32,
    #[serde(with = "secs")]
    pub submission_latency: Duration,
    #[serde(with = "secs")]
    pub scheduler_cycle: Duration,
    pub filesystem_root: PathBuf,
}

impl MachineConfig {
    /// A machine with the default per-user caps (64 in system, 16 running),
    /// 128 cores per node and one virtual second of submission latency and
    /// scheduler cycle.
    pub fn new(machine_name: impl Into<String>, num_nodes: u32, filesystem_root: impl Into<PathBuf>) -> Self {
        Self {
            machine_name: machine_name.into(),
            num_nodes,
            cores_per_node: DEFAULT_CORES_PER_NODE,
            max_jobs_in_system: DEFAULT_MAX_JOBS_IN_SYSTEM,
            max_running_jobs: DEFAULT_MAX_RUNNING_JOBS,
            submission_latency: Duration::from_secs(1),
            scheduler_cycle: Duration::from_secs(1),
            filesystem_root: filesystem_root.into(),
        }
    }

    pub fn total_cores(&self) -> u64 {
        u64::from(self.num_nodes) * u64::from(self.cores_per_node)
    }

    /// Nodes needed for `cores`, batch schedulers allocating whole nodes.
    pub fn nodes_for_cores(&self, cores: u32) -> u32 {
        cores.div_ceil(self.cores_per_node)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.machine_name.trim().is_empty() {
            return Err("machine_name must not be empty".into());
        }
        for (field, value) in [
            ("num_nodes", self.num_nodes),
            ("cores_per_node", self.cores_per_node),
            ("max_jobs_in_system", self.max_jobs_in_system),
            ("max_running_jobs", self.max_running_jobs),
        ] {
            if value == 0 {
                return Err(format!("{field} must be at least 1"));
            }
        }
        if self.submission_latency.is_zero() {
            return Err("submission_latency must be positive".into());
        }
        if self.scheduler_cycle.is_zero() {
            return Err("scheduler_cycle must be positive".into());
        }
        Ok(())
    }
}

pub(crate) mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod opt_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&d.as_secs_f64()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        Option::<f64>::deserialize(d)?
            .map(|v| Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("invalid machine config at {pos}: {message}")]
    Invalid { pos: Pos, message: String },
}

fn invalid(pos: Pos, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        pos,
        message: message.into(),
    }
}

/// Parse a machine config file: one `---`-separated block per machine.
///
/// ```text
/// machine_name: archer2-sim
/// num_nodes: 1024
/// cores_per_node: 128          # optional, default 128
/// max_jobs_in_system: 64       # optional
/// max_running_jobs: 16         # optional
/// submission_latency: 1.0      # seconds, optional
/// scheduler_cycle: 1.0         # seconds, optional
/// filesystem_root: /scratch/archer2-sim
/// ```
pub fn parse_machine_configs(text: &str) -> Result<Vec<MachineConfig>, ConfigError> {
    let mut out: Vec<MachineConfig> = Vec::new();
    for doc in syntax::parse_documents(text)? {
        let map = doc.expect_map("machine block")?;
        if map.entries.is_empty() {
            continue;
        }
        let str_field = |key: &str| -> Result<String, ConfigError> {
            let node = map
                .get(key)
                .ok_or_else(|| invalid(map.pos, format!("missing `{key}`")))?;
            let s = node.expect_scalar(key)?;
            if s.is_null() {
                return Err(invalid(s.pos, format!("`{key}` must not be empty")));
            }
            Ok(s.text.clone())
        };
        let mut cfg = MachineConfig::new(
            str_field("machine_name")?,
            0,
            PathBuf::from(str_field("filesystem_root")?),
        );
        for (key, pos, node) in &map.entries {
            match key.as_str() {
                "machine_name" | "filesystem_root" => {}
                "num_nodes" => cfg.num_nodes = count(node, key)?,
                "cores_per_node" => cfg.cores_per_node = count(node, key)?,
                "max_jobs_in_system" => cfg.max_jobs_in_system = count(node, key)?,
                "max_running_jobs" => cfg.max_running_jobs = count(node, key)?,
                "submission_latency" => cfg.submission_latency = seconds(node, key)?,
                "scheduler_cycle" => cfg.scheduler_cycle = seconds(node, key)?,
                other => return Err(invalid(*pos, format!("unknown field `{other}`"))),
            }
        }
        if map.get("num_nodes").is_none() {
            return Err(invalid(map.pos, "missing `num_nodes`"));
        }
        cfg.validate().map_err(|m| invalid(map.pos, m))?;
        if out.iter().any(|m| m.machine_name == cfg.machine_name) {
            return Err(invalid(map.pos, format!("duplicate machine `{}`", cfg.machine_name)));
        }
        out.push(cfg);
    }
    Ok(out)
}

fn count(node: &Node, key: &str) -> Result<u32, ConfigError> {
    let s = node.expect_scalar(key)?;
    s.text
        .parse::<u32>()
        .map_err(|_| invalid(s.pos, format!("`{key}` must be a non-negative integer, got `{}`", s.text)))
}

fn seconds(node: &Node, key: &str) -> Result<Duration, ConfigError> {
    let s = node.expect_scalar(key)?;
    s.text
        .parse::<f64>()
        .ok()
        .and_then(|v| Duration::try_from_secs_f64(v).ok())
        .ok_or_else(|| invalid(s.pos, format!("`{key}` must be a duration in seconds, got `{}`", s.text)))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("duplicate machine `{0}`")]
    Duplicate(String),
    #[error("machine `{name}`: {message}")]
    Invalid { name: String, message: String },
}

/// The set of machines the marshalling tier may place work on.
#[derive(Debug, Clone, Default)]
pub struct MachineRegistry {
    machines: BTreeMap<String, MachineConfig>,
}

impl MachineRegistry {
    pub fn new(configs: impl IntoIterator<Item = MachineConfig>) -> Result<Self, RegistryError> {
        let mut machines = BTreeMap::new();
        for cfg in configs {
            cfg.validate().map_err(|message| RegistryError::Invalid {
                name: cfg.machine_name.clone(),
                message,
            })?;
            let name = cfg.machine_name.clone();
            if machines.insert(name.clone(), cfg).is_some() {
                return Err(RegistryError::Duplicate(name));
            }
        }
        Ok(Self { machines })
    }

    pub fn get(&self, name: &str) -> Option<&MachineConfig> {
        self.machines.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MachineConfig> {
        self.machines.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.machines.keys().map(String::as_str)
    }

    /// Resolve a path on `machine` to the local sandbox. Paths must be
    /// absolute and stay inside the machine's filesystem root.
    pub fn resolve(&self, machine: &str, path: &Path) -> Option<PathBuf> {
        let root = &self.machines.get(machine)?.filesystem_root;
        within_root(root, path)
    }
}

/// Lexically normalise `path` and check it lies under `root`.
pub(crate) fn within_root(root: &Path, path: &Path) -> Option<PathBuf> {
    use std::path::Component;
    if !path.is_absolute() {
        return None;
    }
    let mut normal = PathBuf::new();
    for comp in path.components() {
        match comp {
            Component::ParentDir => {
                if !normal.pop() {
                    return None;
                }
            }
            Component::CurDir => {}
            other => normal.push(other.as_os_str()),
        }
    }
    normal.starts_with(root).then_some(normal)
}

/// One member of a scattered node job (or the single command of a plain step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberTask {
    pub index: usize,
    pub command: String,
    pub cores: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkModel {
    /// Completes at the instant it is dispatched.
    Noop,
    /// Occupies its nodes for a fixed virtual duration.
    Synthetic(#[serde(with = "secs")] Duration),
    /// Runs `sh <script>` in the job directory at dispatch.
    Script(PathBuf),
    /// Runs every member command concurrently at dispatch, each with
    /// `MEMBER_INDEX` and `CORES_PER_MEMBER` in its environment.
    Members(Vec<MemberTask>),
}

impl WorkModel {
    pub fn label(&self) -> &'static str {
        match self {
            WorkModel::Noop => "noop",
            WorkModel::Synthetic(_) => "synthetic",
            WorkModel::Script(_) => "script",
            WorkModel::Members(_) => "members",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub nodes: u32,
    #[serde(with = "secs")]
    pub walltime: Duration,
    pub work: WorkModel,
    /// Simulation id or runner step that owns the job, for logs.
    pub owner: Option<String>,
    /// Working directory on the local sandbox for script and member work.
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Pending,
    Running,
    Completed,
    Error,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Error | JobState::Cancelled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Pending => "PENDING",
            JobState::Running => "RUNNING",
            JobState::Completed => "COMPLETED",
            JobState::Error => "ERROR",
            JobState::Cancelled => "CANCELLED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberResult {
    pub index: usize,
    pub exit_code: Option<i32>,
    pub success: bool,
    pub wall_ms: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: JobId,
    pub machine: String,
    pub nodes_requested: u32,
    #[serde(with = "secs")]
    pub walltime_limit: Duration,
    pub work: WorkModel,
    pub owner: Option<String>,
    pub workdir: Option<PathBuf>,
    pub state: JobState,
    /// Virtual instant the job entered the scheduler queue.
    #[serde(with = "secs")]
    pub submit_time: Duration,
    #[serde(with = "opt_secs")]
    pub start_time: Option<Duration>,
    #[serde(with = "opt_secs")]
    pub end_time: Option<Duration>,
    pub detail: String,
    pub members: Vec<MemberResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineSummary {
    pub machine_name: String,
    pub num_nodes: u32,
    pub cores_per_node: u32,
    /// Accepted jobs not yet running, including those still in the
    /// submission channel.
    pub pending: u32,
    pub running: u32,
    pub free_nodes: u32,
}

impl MachineSummary {
    pub fn jobs_in_system(&self) -> u32 {
        self.pending + self.running
    }

    pub fn max_cores(&self) -> u64 {
        u64::from(self.num_nodes) * u64::from(self.cores_per_node)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("rejected: per-user job limit reached")]
    QueueFull,
    #[error("rejected: {nodes} nodes requested, machine has {available}")]
    TooLarge { nodes: u32, available: u32 },
    #[error("invalid job: {0}")]
    Invalid(String),
    #[error("unknown machine `{0}`")]
    UnknownMachine(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConnectorError {
    #[error("unknown machine `{0}`")]
    UnknownMachine(String),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {0} already finished")]
    AlreadyFinished(JobId),
    #[error("event limit of {0} exceeded")]
    LivelockGuard(u64),
    #[error("no pending events while waiting for jobs {0:?}")]
    Stalled(Vec<JobId>),
}

/// A state change reported by a machine for one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub machine: String,
    pub job_id: JobId,
    pub state: JobState,
    pub detail: String,
    #[serde(with = "secs")]
    pub time: Duration,
}

pub trait JobEventListener: Send + Sync {
    fn on_job_event(&self, event: &JobEvent);
}

/// What the marshalling tier needs from a machine's batch system.
pub trait MachineConnector: Send + Sync {
    fn machine_name(&self) -> &str;
    fn summary(&self) -> Result<MachineSummary, ConnectorError>;
    fn submit(&self, spec: JobSpec) -> Result<JobId, SubmitError>;
    fn cancel(&self, job: JobId) -> Result<(), ConnectorError>;
    fn query(&self, job: JobId) -> Result<Job, ConnectorError>;
    /// The connector's notion of the current instant.
    fn now(&self) -> Duration;
    /// Block until at least one of `jobs` is terminal; returns those that are.
    fn wait_any(&self, jobs: &[JobId]) -> Result<Vec<JobId>, ConnectorError>;
}
