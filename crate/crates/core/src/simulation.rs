//! Two-phase job submission. `create_simulation` picks a machine and
//! prepares the job directory; `submit_simulation` hands the job to the
//! machine without waiting for it. Job state changes come back through
//! [`JobEventListener`] and are turned into callback messages on the
//! incident's queues.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::engine::{Engine, EngineError, IncidentObserver, IncidentState};
use crate::ids::{IncidentId, JobId, SimId};
use crate::machine::{
    ConnectorError, JobEvent, JobEventListener, JobSpec, JobState, MachineConnector, MachineRegistry,
    MachineSummary, SubmitError, WorkModel,
};
use crate::walltime::parse_walltime;

pub const SIM_ORIGINATOR: &str = "simulation-manager";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SimStatus {
    Created,
    Queued,
    Running,
    Completed,
    Error,
    Cancelled,
}

impl SimStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, SimStatus::Completed | SimStatus::Error | SimStatus::Cancelled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SimStatus::Created => "CREATED",
            SimStatus::Queued => "QUEUED",
            SimStatus::Running => "RUNNING",
            SimStatus::Completed => "COMPLETED",
            SimStatus::Error => "ERROR",
            SimStatus::Cancelled => "CANCELLED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "CREATED" => SimStatus::Created,
            "QUEUED" => SimStatus::Queued,
            "RUNNING" => SimStatus::Running,
            "COMPLETED" => SimStatus::Completed,
            "ERROR" => SimStatus::Error,
            "CANCELLED" => SimStatus::Cancelled,
            _ => return None,
        })
    }

    /// Whether `self -> to` is allowed. Jobs may finish between two
    /// observations, so QUEUED may jump straight to a terminal state.
    fn can_become(self, to: SimStatus) -> bool {
        use SimStatus::*;
        match (self, to) {
            (s, Cancelled) => !s.is_terminal(),
            (Created, Queued) => true,
            (Queued, Running | Completed | Error) => true,
            (Running, Completed | Error) => true,
            _ => false,
        }
    }
}

impl fmt::Display for SimStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn from_job_state(state: JobState) -> SimStatus {
    match state {
        JobState::Pending => SimStatus::Queued,
        JobState::Running => SimStatus::Running,
        JobState::Completed => SimStatus::Completed,
        JobState::Error => SimStatus::Error,
        JobState::Cancelled => SimStatus::Cancelled,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub sim_id: SimId,
    pub incident_id: IncidentId,
    pub requested_cores: u32,
    pub nodes: u32,
    #[serde(with = "crate::machine::secs")]
    pub walltime_limit: Duration,
    pub description: String,
    pub submit_script: PathBuf,
    pub machine_name: String,
    pub directory: PathBuf,
    pub status: SimStatus,
    pub callbacks: BTreeMap<SimStatus, String>,
    pub job_id: Option<JobId>,
    /// Virtual time at which each status was entered.
    #[serde(with = "status_times")]
    pub timestamps: BTreeMap<SimStatus, Duration>,
    pub deferred: bool,
    pub detail: String,
    pub work: WorkModel,
}

/// What a workflow stage asks for when creating a simulation.
#[derive(Debug, Clone)]
pub struct SimulationRequest {
    pub incident_id: IncidentId,
    pub requested_cores: u32,
    /// `HH:MM:SS`
    pub walltime: String,
    pub description: String,
    pub submit_script: PathBuf,
    pub callbacks: BTreeMap<SimStatus, String>,
    pub template_dir: Option<PathBuf>,
    /// Defaults to running `submit_script` in the job directory.
    pub work: Option<WorkModel>,
}

impl SimulationRequest {
    pub fn new(incident_id: IncidentId, requested_cores: u32, walltime: &str, submit_script: impl Into<PathBuf>) -> Self {
        Self {
            incident_id,
            requested_cores,
            walltime: walltime.to_string(),
            description: String::new(),
            submit_script: submit_script.into(),
            callbacks: BTreeMap::new(),
            template_dir: None,
            work: None,
        }
    }

    pub fn description(mut self, d: &str) -> Self {
        self.description = d.to_string();
        self
    }

    pub fn callback(mut self, status: SimStatus, queue: &str) -> Self {
        self.callbacks.insert(status, queue.to_string());
        self
    }

    pub fn template(mut self, dir: impl Into<PathBuf>) -> Self {
        self.template_dir = Some(dir.into());
        self
    }

    pub fn work(mut self, work: WorkModel) -> Self {
        self.work = Some(work);
        self
    }
}

/// The JSON body of a callback message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Callback {
    pub sim_id: SimId,
    pub status: SimStatus,
    pub detail: String,
}

#[derive(Debug, thiserror::Error)]
pub enum SimulationError {
    #[error("no machine can provide {cores} cores")]
    NoEligibleMachine { cores: u32 },
    #[error("unknown incident `{0}`")]
    UnknownIncident(IncidentId),
    #[error("incident `{0}` is not active")]
    IncidentNotActive(IncidentId),
    #[error("callback queue `{0}` is not bound for this incident")]
    BadCallbackQueue(String),
    #[error("template directory {0} not found")]
    TemplateNotFound(PathBuf),
    #[error("unknown simulation `{0}`")]
    UnknownSimulation(SimId),
    #[error("simulation `{sim}` cannot go from {from} to {to}")]
    InvalidStateTransition { sim: SimId, from: SimStatus, to: SimStatus },
    #[error("unknown job {job} on {machine}")]
    UnknownJob { machine: String, job: JobId },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("could not prepare job directory {path}: {source}")]
    Directory {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("machine rejected submission: {0}")]
    Rejected(SubmitError),
    #[error(transparent)]
    Connector(#[from] ConnectorError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Picks a machine for a request. Implementations must be deterministic.
pub trait MachineSelectionPolicy: Send + Sync {
    fn policy_name(&self) -> &str;
    fn select(&self, cores: u32, walltime: Duration, machines: &[MachineSummary]) -> Result<String, SimulationError>;
}

fn eligible(cores: u32, machines: &[MachineSummary]) -> impl Iterator<Item = &MachineSummary> {
    machines.iter().filter(move |m| m.max_cores() >= u64::from(cores))
}

/// Fewest jobs in the system; ties go to the lexicographically first name.
#[derive(Debug, Default, Clone, Copy)]
pub struct LeastLoaded;

impl MachineSelectionPolicy for LeastLoaded {
    fn policy_name(&self) -> &str {
        "least_loaded"
    }

    fn select(&self, cores: u32, _walltime: Duration, machines: &[MachineSummary]) -> Result<String, SimulationError> {
        eligible(cores, machines)
            .min_by(|a, b| {
                a.jobs_in_system()
                    .cmp(&b.jobs_in_system())
                    .then_with(|| a.machine_name.cmp(&b.machine_name))
            })
            .map(|m| m.machine_name.clone())
            .ok_or(SimulationError::NoEligibleMachine { cores })
    }
}

/// The lexicographically first machine large enough.
#[derive(Debug, Default, Clone, Copy)]
pub struct FirstFit;

impl MachineSelectionPolicy for FirstFit {
    fn policy_name(&self) -> &str {
        "first_fit"
    }

    fn select(&self, cores: u32, _walltime: Duration, machines: &[MachineSummary]) -> Result<String, SimulationError> {
        eligible(cores, machines)
            .min_by(|a, b| a.machine_name.cmp(&b.machine_name))
            .map(|m| m.machine_name.clone())
            .ok_or(SimulationError::NoEligibleMachine { cores })
    }
}

pub fn select_machine(cores: u32, walltime: Duration, machines: &[MachineSummary]) -> Result<String, SimulationError> {
    LeastLoaded.select(cores, walltime, machines)
}

#[derive(Default)]
struct SimState {
    sims: BTreeMap<SimId, Simulation>,
    by_job: HashMap<(String, JobId), SimId>,
    deferred: BTreeMap<String, VecDeque<SimId>>,
    emitted: BTreeSet<(SimId, SimStatus)>,
    next_sim: u64,
}

struct Outgoing {
    incident: IncidentId,
    queue: String,
    payload: Vec<u8>,
}

pub struct SimulationManager {
    engine: Arc<Engine>,
    machines: MachineRegistry,
    connectors: BTreeMap<String, Arc<dyn MachineConnector>>,
    policy: Box<dyn MachineSelectionPolicy>,
    state: Mutex<SimState>,
}

impl SimulationManager {
    /// Every connector must belong to a machine in `machines`.
    pub fn new(
        engine: Arc<Engine>,
        machines: MachineRegistry,
        connectors: Vec<Arc<dyn MachineConnector>>,
    ) -> Result<Self, SimulationError> {
        let mut map = BTreeMap::new();
        for c in connectors {
            let name = c.machine_name().to_string();
            if machines.get(&name).is_none() {
                return Err(SimulationError::Invalid(format!("connector for unregistered machine `{name}`")));
            }
            map.insert(name, c);
        }
        Ok(Self {
            engine,
            machines,
            connectors: map,
            policy: Box::new(LeastLoaded),
            state: Mutex::new(SimState::default()),
        })
    }

    pub fn with_policy(mut self, policy: Box<dyn MachineSelectionPolicy>) -> Self {
        self.policy = policy;
        self
    }

    pub fn policy_name(&self) -> &str {
        self.policy.policy_name()
    }

    fn lock(&self) -> MutexGuard<'_, SimState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn connector(&self, machine: &str) -> Result<&Arc<dyn MachineConnector>, SimulationError> {
        self.connectors
            .get(machine)
            .ok_or_else(|| SimulationError::Connector(ConnectorError::UnknownMachine(machine.to_string())))
    }

    pub fn machines(&self) -> &MachineRegistry {
        &self.machines
    }

    pub fn create_simulation(&self, req: SimulationRequest) -> Result<SimId, SimulationError> {
        let incident = self
            .engine
            .incident(&req.incident_id)
            .ok_or_else(|| SimulationError::UnknownIncident(req.incident_id.clone()))?;
        if incident.state != IncidentState::Active {
            return Err(SimulationError::IncidentNotActive(req.incident_id.clone()));
        }
        if req.requested_cores == 0 {
            return Err(SimulationError::Invalid("requested_cores must be at least 1".into()));
        }
        let walltime = parse_walltime(&req.walltime).map_err(|e| SimulationError::Invalid(e.to_string()))?;
        if let Some(q) = req
            .callbacks
            .values()
            .find(|q| !incident.stage_bindings.contains_key(q.as_str()))
        {
            return Err(SimulationError::BadCallbackQueue(q.clone()));
        }
        if req.submit_script.is_absolute() || req.submit_script.as_os_str().is_empty() {
            return Err(SimulationError::Invalid("submit_script must be a relative path".into()));
        }
        if let Some(t) = &req.template_dir {
            if !t.is_dir() {
                return Err(SimulationError::TemplateNotFound(t.clone()));
            }
        }
        let summaries = self
            .connectors
            .values()
            .map(|c| c.summary())
            .collect::<Result<Vec<_>, _>>()?;
        let machine_name = self.policy.select(req.requested_cores, walltime, &summaries)?;
        let config = self.machines.get(&machine_name).expect("connectors are registered");
        let nodes = config.nodes_for_cores(req.requested_cores);

        let sim_id = {
            let mut st = self.lock();
            st.next_sim += 1;
            SimId::from_counter(st.next_sim)
        };
        let directory = config
            .filesystem_root
            .join(req.incident_id.as_str())
            .join(sim_id.as_str());
        let dir_err = |source| SimulationError::Directory {
            path: directory.clone(),
            source,
        };
        fs::create_dir_all(&directory).map_err(dir_err)?;
        if let Some(t) = &req.template_dir {
            copy_tree(t, &directory).map_err(dir_err)?;
        }
        let now = self.connector(&machine_name)?.now();
        let work = req.work.unwrap_or_else(|| WorkModel::Script(req.submit_script.clone()));
        let sim = Simulation {
            sim_id: sim_id.clone(),
            incident_id: req.incident_id.clone(),
            requested_cores: req.requested_cores,
            nodes,
            walltime_limit: walltime,
            description: req.description,
            submit_script: req.submit_script,
            machine_name: machine_name.clone(),
            directory,
            status: SimStatus::Created,
            callbacks: req.callbacks,
            job_id: None,
            timestamps: BTreeMap::from([(SimStatus::Created, now)]),
            deferred: false,
            detail: String::new(),
            work,
        };
        self.lock().sims.insert(sim_id.clone(), sim);
        self.engine.link_simulation(&req.incident_id, &sim_id)?;
        info!(sim = %sim_id, machine = %machine_name, nodes, "simulation created");
        Ok(sim_id)
    }

    /// Hand the job to its machine. A queue-full rejection parks the
    /// simulation on the machine's deferred list instead of failing.
    pub fn submit_simulation(&self, sim_id: &SimId) -> Result<(), SimulationError> {
        let mut st = self.lock();
        let sim = st
            .sims
            .get(sim_id)
            .ok_or_else(|| SimulationError::UnknownSimulation(sim_id.clone()))?;
        if sim.status != SimStatus::Created || sim.deferred {
            return Err(SimulationError::InvalidStateTransition {
                sim: sim_id.clone(),
                from: sim.status,
                to: SimStatus::Queued,
            });
        }
        let machine = sim.machine_name.clone();
        // every attempt is a round trip to the batch system, even one that
        // ends up on the deferred list
        match self.try_submit(&mut st, sim_id)? {
            true => Ok(()),
            false => {
                self.defer(&mut st, sim_id, &machine, false);
                Ok(())
            }
        }
    }

    fn defer(&self, st: &mut SimState, sim_id: &SimId, machine: &str, front: bool) {
        let list = st.deferred.entry(machine.to_string()).or_default();
        if front {
            list.push_front(sim_id.clone());
        } else {
            list.push_back(sim_id.clone());
        }
        if let Some(sim) = st.sims.get_mut(sim_id) {
            sim.deferred = true;
        }
        debug!(sim = %sim_id, machine, "submission deferred");
    }

    /// `Ok(false)` on a queue-full rejection.
    fn try_submit(&self, st: &mut SimState, sim_id: &SimId) -> Result<bool, SimulationError> {
        let sim = st.sims.get(sim_id).expect("caller checked");
        let machine = sim.machine_name.clone();
        let connector = self.connector(&machine)?;
        let spec = JobSpec {
            nodes: sim.nodes,
            walltime: sim.walltime_limit,
            work: sim.work.clone(),
            owner: Some(sim_id.to_string()),
            workdir: Some(sim.directory.clone()),
        };
        match connector.submit(spec) {
            Ok(job) => {
                let now = connector.now();
                let sim = st.sims.get_mut(sim_id).expect("caller checked");
                sim.job_id = Some(job);
                sim.deferred = false;
                sim.status = SimStatus::Queued;
                sim.timestamps.insert(SimStatus::Queued, now);
                st.by_job.insert((machine, job), sim_id.clone());
                Ok(true)
            }
            Err(SubmitError::QueueFull) => Ok(false),
            Err(e) => Err(SimulationError::Rejected(e)),
        }
    }

    /// One release attempt for the head of `machine`'s deferred list.
    fn release_one(&self, st: &mut SimState, machine: &str) {
        let Some(sim_id) = st.deferred.get_mut(machine).and_then(VecDeque::pop_front) else {
            return;
        };
        match self.try_submit(st, &sim_id) {
            Ok(true) => debug!(sim = %sim_id, "deferred submission released"),
            Ok(false) => self.defer(st, &sim_id, machine, true),
            Err(e) => {
                warn!(sim = %sim_id, error = %e, "deferred submission failed");
                if let Some(sim) = st.sims.get_mut(&sim_id) {
                    sim.deferred = false;
                    sim.detail = e.to_string();
                }
            }
        }
    }

    pub fn cancel_simulation(&self, sim_id: &SimId) -> Result<(), SimulationError> {
        let outgoing = {
            let mut st = self.lock();
            let sim = st
                .sims
                .get(sim_id)
                .ok_or_else(|| SimulationError::UnknownSimulation(sim_id.clone()))?;
            if sim.status.is_terminal() {
                return Err(SimulationError::InvalidStateTransition {
                    sim: sim_id.clone(),
                    from: sim.status,
                    to: SimStatus::Cancelled,
                });
            }
            let machine = sim.machine_name.clone();
            let job_id = sim.job_id;
            if sim.deferred {
                if let Some(list) = st.deferred.get_mut(&machine) {
                    list.retain(|s| s != sim_id);
                }
            }
            if let Some(job) = job_id {
                match self.connector(&machine)?.cancel(job) {
                    Ok(()) | Err(ConnectorError::AlreadyFinished(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            let now = self.connector(&machine)?.now();
            self.transition(&mut st, sim_id, SimStatus::Cancelled, "cancelled", now)
        };
        self.send(outgoing);
        Ok(())
    }

    /// Cancel every non-terminal simulation of an incident.
    pub fn cancel_for_incident(&self, incident: &IncidentId) {
        let ids: Vec<SimId> = self
            .lock()
            .sims
            .values()
            .filter(|s| s.incident_id == *incident && !s.status.is_terminal())
            .map(|s| s.sim_id.clone())
            .collect();
        for id in ids {
            if let Err(e) = self.cancel_simulation(&id) {
                warn!(sim = %id, error = %e, "could not cancel simulation");
            }
        }
    }

    /// Apply a status change, returning the callback to send (once per
    /// (simulation, status)).
    fn transition(
        &self,
        st: &mut SimState,
        sim_id: &SimId,
        to: SimStatus,
        detail: &str,
        now: Duration,
    ) -> Option<Outgoing> {
        let sim = st.sims.get_mut(sim_id)?;
        if !sim.status.can_become(to) {
            debug!(sim = %sim_id, from = %sim.status, to = %to, "ignored status change");
            return None;
        }
        sim.status = to;
        sim.deferred = false;
        if !detail.is_empty() {
            sim.detail = detail.to_string();
        }
        let last = sim.timestamps.values().max().copied().unwrap_or_default();
        sim.timestamps.insert(to, now.max(last));
        let queue = sim.callbacks.get(&to)?.clone();
        let incident = sim.incident_id.clone();
        if !st.emitted.insert((sim_id.clone(), to)) {
            return None;
        }
        let payload = serde_json::to_vec(&Callback {
            sim_id: sim_id.clone(),
            status: to,
            detail: detail.to_string(),
        })
        .expect("callback serializes");
        Some(Outgoing {
            incident,
            queue,
            payload,
        })
    }

    fn send(&self, outgoing: Option<Outgoing>) {
        let Some(o) = outgoing else { return };
        if let Err(e) = self.engine.send_message(&o.queue, &o.incident, o.payload, SIM_ORIGINATOR) {
            warn!(queue = %o.queue, incident = %o.incident, error = %e, "callback not delivered");
        }
    }

    pub fn handle_job_event(
        &self,
        machine: &str,
        job_id: JobId,
        state: JobState,
        detail: &str,
        time: Duration,
    ) -> Result<(), SimulationError> {
        let (outgoing, known) = {
            let mut st = self.lock();
            let sim_id = st.by_job.get(&(machine.to_string(), job_id)).cloned();
            let outgoing = sim_id
                .as_ref()
                .and_then(|id| self.transition(&mut st, id, from_job_state(state), detail, time));
            if state.is_terminal() {
                self.release_one(&mut st, machine);
            }
            (outgoing, sim_id.is_some())
        };
        self.send(outgoing);
        if known {
            Ok(())
        } else {
            Err(SimulationError::UnknownJob {
                machine: machine.to_string(),
                job: job_id,
            })
        }
    }

    pub fn get_simulation(&self, sim_id: &SimId) -> Option<Simulation> {
        self.lock().sims.get(sim_id).cloned()
    }

    pub fn simulations(&self) -> Vec<Simulation> {
        self.lock().sims.values().cloned().collect()
    }

    pub fn simulations_for(&self, incident: &IncidentId) -> Vec<Simulation> {
        self.lock()
            .sims
            .values()
            .filter(|s| s.incident_id == *incident)
            .cloned()
            .collect()
    }

    /// Simulations waiting for queue space, over all machines.
    pub fn deferred_count(&self) -> usize {
        self.lock().deferred.values().map(VecDeque::len).sum()
    }
}

impl JobEventListener for SimulationManager {
    fn on_job_event(&self, event: &JobEvent) {
        if let Err(e) = self.handle_job_event(&event.machine, event.job_id, event.state, &event.detail, event.time) {
            debug!(error = %e, "job event not tied to a simulation");
        }
    }
}

impl IncidentObserver for SimulationManager {
    fn incident_cancelled(&self, incident: &IncidentId) {
        self.cancel_for_incident(incident);
    }
}

/// Recursive verbatim copy of `from`'s contents into `to`.
pub fn copy_tree(from: &Path, to: &Path) -> io::Result<()> {
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            fs::create_dir_all(&target)?;
            copy_tree(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

mod status_times {
    use std::collections::BTreeMap;
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::SimStatus;

    pub fn serialize<S: Serializer>(map: &BTreeMap<SimStatus, Duration>, s: S) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(k, v)| (k.as_str(), v.as_secs_f64()))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<SimStatus, Duration>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                let status = SimStatus::parse(&k).ok_or_else(|| serde::de::Error::custom(format!("bad status {k}")))?;
                let t = Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)?;
                Ok((status, t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(name: &str, pending: u32, running: u32) -> MachineSummary {
        MachineSummary {
            machine_name: name.into(),
            num_nodes: 2,
            cores_per_node: 128,
            pending,
            running,
            free_nodes: 2,
        }
    }

    #[test]
    fn least_loaded_policy() {
        let a = summary("a", 2, 1);
        let b = summary("b", 1, 0);
        assert_eq!(select_machine(1, Duration::ZERO, &[a.clone(), b]).unwrap(), "b");
        let b2 = summary("b", 2, 1);
        assert_eq!(select_machine(1, Duration::ZERO, &[b2, a]).unwrap(), "a");
        assert!(matches!(
            select_machine(1_000_000, Duration::ZERO, &[summary("a", 0, 0)]),
            Err(SimulationError::NoEligibleMachine { .. })
        ));
    }

    #[test]
    fn transition_table() {
        use SimStatus::*;
        assert!(Created.can_become(Queued));
        assert!(!Created.can_become(Running));
        assert!(Queued.can_become(Running));
        assert!(Running.can_become(Completed));
        assert!(!Completed.can_become(Cancelled));
        assert!(Created.can_become(Cancelled));
        assert!(!Running.can_become(Queued));
    }
}
