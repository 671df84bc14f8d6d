//! Discrete-event simulated batch system.
//!
//! Each machine has a node pool, one strict-FIFO queue dispatched in units
//! of nodes (no backfill), a cap on jobs in the system and a cap on running
//! jobs. Submissions go through a serial channel per machine: every attempt
//! that reaches the machine occupies it for `submission_latency`, and an
//! accepted job enters the queue when its slot in the channel ends. Jobs
//! accepted but still in the channel count towards the in-system cap.
//!
//! The scheduler runs a dispatch pass at every multiple of
//! `scheduler_cycle` while jobs are queued. Completions are separate events,
//! so a job finishing at the instant it starts does not free its running
//! slot within the same pass.
//!
//! All state lives behind one mutex and advances only when the caller
//! drives the clock ([`Testbed::step`], [`Testbed::run_until_idle`],
//! [`Testbed::advance_to`]). Job events are handed to the registered
//! [`JobEventListener`] after the lock is released.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, Weak};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use tracing::{debug, warn};

use crate::ids::JobId;
use crate::machine::{
    ConnectorError, Job, JobEvent, JobEventListener, JobSpec, JobState, MachineConfig,
    MachineConnector, MachineSummary, MemberResult, MemberTask, RegistryError, SubmitError,
    WorkModel,
};

pub const DEFAULT_MAX_EVENTS: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LogKind {
    Submit,
    Reject,
    Queued,
    Start,
    Complete,
    Error,
    Cancel,
}

impl LogKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LogKind::Submit => "SUBMIT",
            LogKind::Reject => "REJECT",
            LogKind::Queued => "QUEUED",
            LogKind::Start => "START",
            LogKind::Complete => "COMPLETE",
            LogKind::Error => "ERROR",
            LogKind::Cancel => "CANCEL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    #[serde(with = "crate::machine::secs")]
    pub time: Duration,
    pub seq: u64,
    pub kind: LogKind,
    pub job_id: Option<JobId>,
    pub machine: String,
    pub detail: String,
}

#[derive(Debug, Clone)]
enum EventKind {
    Arrive { machine: String, job: JobId },
    Tick { machine: String },
    Finish { machine: String, job: JobId, state: JobState, detail: String },
}

#[derive(Debug)]
struct Scheduled {
    time: Duration,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap and we want the earliest (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct MachineState {
    config: MachineConfig,
    jobs: BTreeMap<JobId, Job>,
    in_channel: BTreeSet<JobId>,
    queue: VecDeque<JobId>,
    running: BTreeSet<JobId>,
    free_nodes: u32,
    channel_free_at: Duration,
    tick_scheduled: bool,
}

impl MachineState {
    fn in_system(&self) -> usize {
        self.in_channel.len() + self.queue.len() + self.running.len()
    }

    fn summary(&self) -> MachineSummary {
        MachineSummary {
            machine_name: self.config.machine_name.clone(),
            num_nodes: self.config.num_nodes,
            cores_per_node: self.config.cores_per_node,
            pending: (self.in_channel.len() + self.queue.len()) as u32,
            running: self.running.len() as u32,
            free_nodes: self.free_nodes,
        }
    }
}

struct Des {
    now: Duration,
    seq: u64,
    log_seq: u64,
    heap: BinaryHeap<Scheduled>,
    machines: BTreeMap<String, MachineState>,
    job_machine: BTreeMap<JobId, String>,
    next_job: u64,
    log: Vec<LogRecord>,
    outbox: VecDeque<JobEvent>,
    processed: u64,
}

impl Des {
    fn schedule(&mut self, time: Duration, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Scheduled {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn log(&mut self, kind: LogKind, machine: &str, job_id: Option<JobId>, detail: String) {
        self.log_seq += 1;
        self.log.push(LogRecord {
            time: self.now,
            seq: self.log_seq,
            kind,
            job_id,
            machine: machine.to_string(),
            detail,
        });
    }

    fn notify(&mut self, machine: &str, job_id: JobId, state: JobState, detail: &str) {
        self.outbox.push_back(JobEvent {
            machine: machine.to_string(),
            job_id,
            state,
            detail: detail.to_string(),
            time: self.now,
        });
    }

    fn ensure_tick(&mut self, machine: &str) {
        let m = self.machines.get_mut(machine).expect("known machine");
        if m.tick_scheduled {
            return;
        }
        m.tick_scheduled = true;
        let at = next_boundary(self.now, m.config.scheduler_cycle);
        self.schedule(at, EventKind::Tick { machine: machine.to_string() });
    }

    fn submit(&mut self, machine: &str, spec: JobSpec) -> Result<JobId, SubmitError> {
        let now = self.now;
        let m = self
            .machines
            .get_mut(machine)
            .ok_or_else(|| SubmitError::UnknownMachine(machine.to_string()))?;
        if spec.nodes == 0 {
            return Err(SubmitError::Invalid("a job needs at least one node".into()));
        }
        if spec.nodes > m.config.num_nodes {
            return Err(SubmitError::TooLarge {
                nodes: spec.nodes,
                available: m.config.num_nodes,
            });
        }
        if matches!(spec.work, WorkModel::Script(_)) && spec.workdir.is_none() {
            return Err(SubmitError::Invalid("script jobs need a working directory".into()));
        }
        let slot_end = m.channel_free_at.max(now) + m.config.submission_latency;
        m.channel_free_at = slot_end;
        if m.in_system() >= m.config.max_jobs_in_system as usize {
            let detail = format!("machine={machine} reason=queue_full owner={}", owner_label(&spec));
            self.log(LogKind::Reject, machine, None, detail);
            return Err(SubmitError::QueueFull);
        }
        self.next_job += 1;
        let job_id = JobId(self.next_job);
        let detail = format!(
            "machine={machine} nodes={} work={} owner={} queued_at={:.6}",
            spec.nodes,
            spec.work.label(),
            owner_label(&spec),
            slot_end.as_secs_f64()
        );
        m.in_channel.insert(job_id);
        m.jobs.insert(
            job_id,
            Job {
                job_id,
                machine: machine.to_string(),
                nodes_requested: spec.nodes,
                walltime_limit: spec.walltime,
                work: spec.work,
                owner: spec.owner,
                workdir: spec.workdir,
                state: JobState::Pending,
                submit_time: slot_end,
                start_time: None,
                end_time: None,
                detail: String::new(),
                members: Vec::new(),
            },
        );
        self.job_machine.insert(job_id, machine.to_string());
        self.log(LogKind::Submit, machine, Some(job_id), detail);
        self.schedule(
            slot_end,
            EventKind::Arrive {
                machine: machine.to_string(),
                job: job_id,
            },
        );
        Ok(job_id)
    }

    fn cancel(&mut self, machine: &str, job_id: JobId) -> Result<(), ConnectorError> {
        let now = self.now;
        let m = self
            .machines
            .get_mut(machine)
            .ok_or_else(|| ConnectorError::UnknownMachine(machine.to_string()))?;
        let job = m.jobs.get_mut(&job_id).ok_or(ConnectorError::UnknownJob(job_id))?;
        if job.state.is_terminal() {
            return Err(ConnectorError::AlreadyFinished(job_id));
        }
        let was = job.state;
        job.state = JobState::Cancelled;
        job.end_time = Some(now);
        job.detail = "cancelled".into();
        let nodes = job.nodes_requested;
        if was == JobState::Running {
            m.running.remove(&job_id);
            m.free_nodes += nodes;
        } else if !m.in_channel.remove(&job_id) {
            m.queue.retain(|j| *j != job_id);
        }
        let detail = format!("machine={machine} was={}", was.as_str());
        self.log(LogKind::Cancel, machine, Some(job_id), detail);
        self.notify(machine, job_id, JobState::Cancelled, "cancelled");
        Ok(())
    }

    /// Whether `ev` refers to a job that was cancelled after it was scheduled.
    fn is_stale(&self, ev: &Scheduled) -> bool {
        match &ev.kind {
            EventKind::Arrive { machine, job } => !self.machines[machine].in_channel.contains(job),
            EventKind::Finish { machine, job, .. } => self.machines[machine].jobs[job].state != JobState::Running,
            EventKind::Tick { .. } => false,
        }
    }

    /// Discard stale events at the top of the heap so they never move the clock.
    fn drop_stale(&mut self) {
        while self.heap.peek().is_some_and(|ev| self.is_stale(ev)) {
            self.heap.pop();
        }
    }

    fn next_time(&mut self) -> Option<Duration> {
        self.drop_stale();
        self.heap.peek().map(|e| e.time)
    }

    /// Pop and apply the next event. `None` when the heap is empty.
    fn process_next(&mut self) -> Option<()> {
        self.drop_stale();
        let ev = self.heap.pop()?;
        debug_assert!(ev.time >= self.now, "virtual time must not run backwards");
        self.now = ev.time;
        self.processed += 1;
        match ev.kind {
            EventKind::Arrive { machine, job } => self.arrive(&machine, job),
            EventKind::Tick { machine } => self.dispatch(&machine),
            EventKind::Finish {
                machine,
                job,
                state,
                detail,
            } => self.finish(&machine, job, state, detail),
        }
        Some(())
    }

    fn arrive(&mut self, machine: &str, job_id: JobId) {
        let m = self.machines.get_mut(machine).expect("known machine");
        if !m.in_channel.remove(&job_id) {
            // cancelled while in the submission channel
            return;
        }
        m.queue.push_back(job_id);
        let detail = format!("machine={machine}");
        self.log(LogKind::Queued, machine, Some(job_id), detail);
        self.ensure_tick(machine);
    }

    fn dispatch(&mut self, machine: &str) {
        let now = self.now;
        let mut started = Vec::new();
        {
            let m = self.machines.get_mut(machine).expect("known machine");
            m.tick_scheduled = false;
            while let Some(&head) = m.queue.front() {
                let nodes = m.jobs[&head].nodes_requested;
                if m.running.len() >= m.config.max_running_jobs as usize || m.free_nodes < nodes {
                    break;
                }
                m.queue.pop_front();
                m.running.insert(head);
                m.free_nodes -= nodes;
                let job = m.jobs.get_mut(&head).expect("queued job exists");
                job.state = JobState::Running;
                job.start_time = Some(now);
                started.push(head);
            }
        }
        for job_id in started {
            let (detail, finish) = self.start(machine, job_id);
            self.log(LogKind::Start, machine, Some(job_id), detail);
            self.notify(machine, job_id, JobState::Running, "");
            let (at, state, detail) = finish;
            self.schedule(
                at,
                EventKind::Finish {
                    machine: machine.to_string(),
                    job: job_id,
                    state,
                    detail,
                },
            );
        }
        if !self.machines[machine].queue.is_empty() {
            self.ensure_tick(machine);
        }
    }

    /// Run (or model) the job's work; returns the START log detail and when
    /// and how the job ends.
    fn start(&mut self, machine: &str, job_id: JobId) -> (String, (Duration, JobState, String)) {
        let now = self.now;
        let m = self.machines.get_mut(machine).expect("known machine");
        let free = m.free_nodes;
        let job = m.jobs.get_mut(&job_id).expect("started job exists");
        let detail = format!("machine={machine} nodes={} free_nodes={free}", job.nodes_requested);
        let finish = match &job.work {
            WorkModel::Noop => (now, JobState::Completed, String::new()),
            WorkModel::Synthetic(d) => {
                if *d > job.walltime_limit {
                    (now + job.walltime_limit, JobState::Error, "walltime exceeded".to_string())
                } else {
                    (now + *d, JobState::Completed, String::new())
                }
            }
            WorkModel::Script(script) => {
                let dir = job.workdir.clone().expect("validated at submit");
                let result = run_script(&dir, script, job_id);
                let state = if result.success { JobState::Completed } else { JobState::Error };
                let detail = result.detail.clone();
                job.members = vec![result];
                (now, state, detail)
            }
            WorkModel::Members(tasks) => {
                let results = run_members(job.workdir.as_deref(), tasks);
                let failed: Vec<String> = results
                    .iter()
                    .filter(|r| !r.success)
                    .map(|r| r.index.to_string())
                    .collect();
                job.members = results;
                if failed.is_empty() {
                    (now, JobState::Completed, String::new())
                } else {
                    (now, JobState::Error, format!("members failed: {}", failed.join(" ")))
                }
            }
        };
        (detail, finish)
    }

    fn finish(&mut self, machine: &str, job_id: JobId, state: JobState, detail: String) {
        let now = self.now;
        let m = self.machines.get_mut(machine).expect("known machine");
        let job = m.jobs.get_mut(&job_id).expect("finished job exists");
        if job.state != JobState::Running {
            // cancelled before its completion event fired
            return;
        }
        job.state = state;
        job.end_time = Some(now);
        job.detail = detail.clone();
        m.running.remove(&job_id);
        m.free_nodes += job.nodes_requested;
        let kind = if state == JobState::Completed { LogKind::Complete } else { LogKind::Error };
        let log_detail = if detail.is_empty() {
            format!("machine={machine}")
        } else {
            format!("machine={machine} {detail}")
        };
        self.log(kind, machine, Some(job_id), log_detail);
        self.notify(machine, job_id, state, &detail);
    }
}

fn owner_label(spec: &JobSpec) -> &str {
    spec.owner.as_deref().unwrap_or("-")
}

fn next_boundary(now: Duration, cycle: Duration) -> Duration {
    let cycle_ns = cycle.as_nanos();
    let k = now.as_nanos() / cycle_ns + 1;
    let ns = k * cycle_ns;
    Duration::new((ns / 1_000_000_000) as u64, (ns % 1_000_000_000) as u32)
}

fn run_script(dir: &Path, script: &Path, job_id: JobId) -> MemberResult {
    let started = Instant::now();
    let log_path = dir.join(format!("job-{job_id}.out"));
    let output = std::fs::File::create(&log_path).and_then(|out| {
        let err = out.try_clone()?;
        Command::new("sh")
            .arg(script)
            .current_dir(dir)
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err)
            .status()
    });
    let wall_ms = started.elapsed().as_millis() as u64;
    match output {
        Ok(status) => MemberResult {
            index: 0,
            exit_code: status.code(),
            success: status.success(),
            wall_ms,
            detail: if status.success() {
                String::new()
            } else {
                format!("script exited with {status}")
            },
        },
        Err(e) => MemberResult {
            index: 0,
            exit_code: None,
            success: false,
            wall_ms,
            detail: format!("could not run script: {e}"),
        },
    }
}

fn run_members(dir: Option<&Path>, tasks: &[MemberTask]) -> Vec<MemberResult> {
    thread::scope(|scope| {
        let handles: Vec<_> = tasks
            .iter()
            .map(|task| scope.spawn(move || run_member(dir, task)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("member thread panicked"))
            .collect()
    })
}

fn run_member(dir: Option<&Path>, task: &MemberTask) -> MemberResult {
    let started = Instant::now();
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&task.command)
        .env("MEMBER_INDEX", task.index.to_string())
        .env("CORES_PER_MEMBER", task.cores.to_string())
        .stdin(Stdio::null());
    if let Some(dir) = dir {
        cmd.current_dir(dir);
    }
    let out = cmd.output();
    let wall_ms = started.elapsed().as_millis() as u64;
    match out {
        Ok(out) => {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let tail: String = stderr.trim().chars().rev().take(200).collect::<Vec<_>>().into_iter().rev().collect();
            MemberResult {
                index: task.index,
                exit_code: out.status.code(),
                success: out.status.success(),
                wall_ms,
                detail: if out.status.success() {
                    String::new()
                } else if tail.is_empty() {
                    format!("exited with {}", out.status)
                } else {
                    format!("exited with {}: {tail}", out.status)
                },
            }
        }
        Err(e) => MemberResult {
            index: task.index,
            exit_code: None,
            success: false,
            wall_ms,
            detail: format!("could not spawn: {e}"),
        },
    }
}

/// The simulated batch system, shared by every machine it hosts.
pub struct Testbed {
    des: Mutex<Des>,
    listener: RwLock<Option<Weak<dyn JobEventListener>>>,
    max_events: std::sync::atomic::AtomicU64,
}

impl Testbed {
    pub fn new(configs: impl IntoIterator<Item = MachineConfig>) -> Result<Self, RegistryError> {
        let mut machines = BTreeMap::new();
        for config in configs {
            config.validate().map_err(|message| RegistryError::Invalid {
                name: config.machine_name.clone(),
                message,
            })?;
            let name = config.machine_name.clone();
            let state = MachineState {
                free_nodes: config.num_nodes,
                config,
                jobs: BTreeMap::new(),
                in_channel: BTreeSet::new(),
                queue: VecDeque::new(),
                running: BTreeSet::new(),
                channel_free_at: Duration::ZERO,
                tick_scheduled: false,
            };
            if machines.insert(name.clone(), state).is_some() {
                return Err(RegistryError::Duplicate(name));
            }
        }
        Ok(Self {
            des: Mutex::new(Des {
                now: Duration::ZERO,
                seq: 0,
                log_seq: 0,
                heap: BinaryHeap::new(),
                machines,
                job_machine: BTreeMap::new(),
                next_job: 0,
                log: Vec::new(),
                outbox: VecDeque::new(),
                processed: 0,
            }),
            listener: RwLock::new(None),
            max_events: std::sync::atomic::AtomicU64::new(DEFAULT_MAX_EVENTS),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Des> {
        self.des.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_listener(&self, listener: Weak<dyn JobEventListener>) {
        *self.listener.write().unwrap_or_else(|e| e.into_inner()) = Some(listener);
    }

    /// Bound on events processed by one `run_until_idle`/`advance_to` call.
    pub fn set_max_events(&self, max: u64) {
        self.max_events.store(max, AtomicOrdering::Relaxed);
    }

    pub fn connector(self: &Arc<Self>, machine: &str) -> Option<TestbedConnector> {
        self.lock().machines.contains_key(machine).then(|| TestbedConnector {
            testbed: Arc::clone(self),
            machine: machine.to_string(),
        })
    }

    pub fn machine_names(&self) -> Vec<String> {
        self.lock().machines.keys().cloned().collect()
    }

    pub fn machine_config(&self, machine: &str) -> Option<MachineConfig> {
        self.lock().machines.get(machine).map(|m| m.config.clone())
    }

    pub fn now(&self) -> Duration {
        self.lock().now
    }

    pub fn submit_job(&self, machine: &str, spec: JobSpec) -> Result<JobId, SubmitError> {
        self.lock().submit(machine, spec)
    }

    pub fn cancel_job(&self, machine: &str, job: JobId) -> Result<(), ConnectorError> {
        self.lock().cancel(machine, job)
    }

    pub fn query_job(&self, machine: &str, job: JobId) -> Result<Job, ConnectorError> {
        let des = self.lock();
        let m = des
            .machines
            .get(machine)
            .ok_or_else(|| ConnectorError::UnknownMachine(machine.to_string()))?;
        m.jobs.get(&job).cloned().ok_or(ConnectorError::UnknownJob(job))
    }

    pub fn machine_summary(&self, machine: &str) -> Result<MachineSummary, ConnectorError> {
        let des = self.lock();
        des.machines
            .get(machine)
            .map(MachineState::summary)
            .ok_or_else(|| ConnectorError::UnknownMachine(machine.to_string()))
    }

    pub fn jobs(&self, machine: &str) -> Vec<Job> {
        self.lock()
            .machines
            .get(machine)
            .map(|m| m.jobs.values().cloned().collect())
            .unwrap_or_default()
    }

    pub fn event_log(&self) -> Vec<LogRecord> {
        self.lock().log.clone()
    }

    pub fn next_event_time(&self) -> Option<Duration> {
        self.lock().next_time()
    }

    /// Deliver queued notifications, or else process one event. Returns
    /// `false` when there was nothing to do.
    pub fn step(&self) -> Result<bool, ConnectorError> {
        let events: Vec<JobEvent> = {
            let mut des = self.lock();
            if des.outbox.is_empty() && des.process_next().is_none() {
                return Ok(false);
            }
            des.outbox.drain(..).collect()
        };
        self.deliver(&events);
        Ok(true)
    }

    fn deliver(&self, events: &[JobEvent]) {
        if events.is_empty() {
            return;
        }
        let listener = self
            .listener
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .as_ref()
            .and_then(Weak::upgrade);
        match listener {
            Some(l) => events.iter().for_each(|e| l.on_job_event(e)),
            None => debug!(count = events.len(), "job events with no listener"),
        }
    }

    fn budget(&self) -> (u64, u64) {
        (self.lock().processed, self.max_events.load(AtomicOrdering::Relaxed))
    }

    fn check_budget(&self, start: u64, max: u64) -> Result<(), ConnectorError> {
        if self.lock().processed - start > max {
            warn!(max, "testbed event limit exceeded");
            return Err(ConnectorError::LivelockGuard(max));
        }
        Ok(())
    }

    /// Process events until none remain; returns the virtual time elapsed.
    pub fn run_until_idle(&self) -> Result<Duration, ConnectorError> {
        let start_time = self.now();
        let (start, max) = self.budget();
        while self.step()? {
            self.check_budget(start, max)?;
        }
        Ok(self.now() - start_time)
    }

    /// Process every event at or before `t`, then move the clock to `t`.
    pub fn advance_to(&self, t: Duration) -> Result<(), ConnectorError> {
        let (start, max) = self.budget();
        loop {
            let has_outbox = !self.lock().outbox.is_empty();
            let due = self.next_event_time().is_some_and(|next| next <= t);
            if !has_outbox && !due {
                break;
            }
            self.step()?;
            self.check_budget(start, max)?;
        }
        let mut des = self.lock();
        if t > des.now {
            des.now = t;
        }
        Ok(())
    }

    /// Event log as CSV with header `time,seq,kind,job_id,detail`.
    pub fn write_event_log_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let log = self.event_log();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "seq", "kind", "job_id", "detail"])?;
        for r in &log {
            w.write_record([
                format!("{:.6}", r.time.as_secs_f64()),
                r.seq.to_string(),
                r.kind.as_str().to_string(),
                r.job_id.map(|j| j.to_string()).unwrap_or_default(),
                r.detail.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn event_log_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_event_log_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Advance virtual time alongside the wall clock (`speed` virtual
    /// seconds per real second) on a background thread. For interactive
    /// service use only; experiments drive the clock explicitly.
    pub fn spawn_wall_clock(self: &Arc<Self>, speed: f64, poll: Duration) -> WallClock {
        let stop = Arc::new(AtomicBool::new(false));
        let testbed = Arc::clone(self);
        let flag = Arc::clone(&stop);
        let origin = Instant::now();
        let base = self.now();
        let handle = thread::spawn(move || {
            while !flag.load(AtomicOrdering::Relaxed) {
                let target = base + origin.elapsed().mul_f64(speed);
                if let Err(e) = testbed.advance_to(target) {
                    warn!(error = %e, "wall-clock driver stopped");
                    break;
                }
                thread::sleep(poll);
            }
        });
        WallClock {
            stop,
            handle: Some(handle),
        }
    }
}

/// Handle for a running wall-clock driver; stops it when dropped.
pub struct WallClock {
    stop: Arc<AtomicBool>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Drop for WallClock {
    fn drop(&mut self) {
        self.stop.store(true, AtomicOrdering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// [`MachineConnector`] for one machine of a [`Testbed`].
#[derive(Clone)]
pub struct TestbedConnector {
    testbed: Arc<Testbed>,
    machine: String,
}

impl TestbedConnector {
    pub fn testbed(&self) -> &Arc<Testbed> {
        &self.testbed
    }
}

impl MachineConnector for TestbedConnector {
    fn machine_name(&self) -> &str {
        &self.machine
    }

    fn summary(&self) -> Result<MachineSummary, ConnectorError> {
        self.testbed.machine_summary(&self.machine)
    }

    fn submit(&self, spec: JobSpec) -> Result<JobId, SubmitError> {
        self.testbed.submit_job(&self.machine, spec)
    }

    fn cancel(&self, job: JobId) -> Result<(), ConnectorError> {
        self.testbed.cancel_job(&self.machine, job)
    }

    fn query(&self, job: JobId) -> Result<Job, ConnectorError> {
        self.testbed.query_job(&self.machine, job)
    }

    fn now(&self) -> Duration {
        self.testbed.now()
    }

    fn wait_any(&self, jobs: &[JobId]) -> Result<Vec<JobId>, ConnectorError> {
        let (start, max) = self.testbed.budget();
        loop {
            let mut done = Vec::new();
            for &job in jobs {
                if self.query(job)?.state.is_terminal() {
                    done.push(job);
                }
            }
            if !done.is_empty() || jobs.is_empty() {
                return Ok(done);
            }
            if !self.testbed.step()? {
                return Err(ConnectorError::Stalled(jobs.to_vec()));
            }
            self.testbed.check_budget(start, max)?;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn secs(s: f64) -> Duration {
        Duration::from_secs_f64(s)
    }

    fn machine(nodes: u32) -> MachineConfig {
        MachineConfig::new("m", nodes, "/nonexistent")
    }

    fn spec(nodes: u32, work: WorkModel) -> JobSpec {
        JobSpec {
            nodes,
            walltime: secs(3600.0),
            work,
            owner: None,
            workdir: None,
        }
    }

    fn noop() -> JobSpec {
        spec(1, WorkModel::Noop)
    }

    #[test]
    fn empty_system_is_idle_immediately() {
        let tb = Testbed::new([machine(2)]).unwrap();
        assert_eq!(tb.run_until_idle().unwrap(), Duration::ZERO);
    }

    #[test]
    fn single_noop_job_trace() {
        let tb = Testbed::new([machine(2)]).unwrap();
        let id = tb.submit_job("m", noop()).unwrap();
        assert_eq!(tb.query_job("m", id).unwrap().state, JobState::Pending);
        assert_eq!(tb.run_until_idle().unwrap(), secs(2.0));
        let job = tb.query_job("m", id).unwrap();
        assert_eq!(job.state, JobState::Completed);
        assert_eq!(job.submit_time, secs(1.0));
        assert_eq!(job.start_time, Some(secs(2.0)));
        assert_eq!(job.end_time, Some(secs(2.0)));
    }

    #[test]
    fn sixty_fifth_submission_is_rejected() {
        let tb = Testbed::new([machine(1000)]).unwrap();
        for _ in 0..64 {
            tb.submit_job("m", noop()).unwrap();
        }
        assert_eq!(tb.submit_job("m", noop()), Err(SubmitError::QueueFull));
        assert_eq!(tb.machine_summary("m").unwrap().jobs_in_system(), 64);
    }

    #[test]
    fn running_cap_holds_back_seventeenth_job() {
        let tb = Testbed::new([machine(100)]).unwrap();
        let ids: Vec<_> = (0..17)
            .map(|_| tb.submit_job("m", spec(1, WorkModel::Synthetic(secs(1000.0)))).unwrap())
            .collect();
        tb.advance_to(secs(100.0)).unwrap();
        let s = tb.machine_summary("m").unwrap();
        assert_eq!(s.running, 16);
        assert_eq!(s.pending, 1);
        assert!(s.free_nodes >= 1);
        assert_eq!(tb.query_job("m", ids[16]).unwrap().state, JobState::Pending);
    }

    #[test]
    fn fifo_head_blocks_without_backfill() {
        let tb = Testbed::new([machine(4)]).unwrap();
        let long = tb.submit_job("m", spec(2, WorkModel::Synthetic(secs(100.0)))).unwrap();
        let big = tb.submit_job("m", spec(4, WorkModel::Noop)).unwrap();
        let small = tb.submit_job("m", spec(1, WorkModel::Noop)).unwrap();
        tb.advance_to(secs(50.0)).unwrap();
        assert_eq!(tb.query_job("m", long).unwrap().state, JobState::Running);
        assert_eq!(tb.machine_summary("m").unwrap().free_nodes, 2);
        assert_eq!(tb.query_job("m", big).unwrap().state, JobState::Pending);
        assert_eq!(tb.query_job("m", small).unwrap().state, JobState::Pending);
        tb.run_until_idle().unwrap();
        let b = tb.query_job("m", big).unwrap();
        let s = tb.query_job("m", small).unwrap();
        assert!(b.start_time.unwrap() >= secs(100.0));
        assert!(s.start_time >= b.start_time);
    }

    #[test]
    fn twenty_noop_jobs_take_two_cycles() {
        let mut cfg = machine(100);
        cfg.submission_latency = Duration::from_millis(1);
        let tb = Testbed::new([cfg]).unwrap();
        for _ in 0..20 {
            tb.submit_job("m", noop()).unwrap();
        }
        // all queued well before the first boundary at t=1
        assert_eq!(tb.run_until_idle().unwrap(), secs(2.0));
        let starts: BTreeSet<_> = tb.jobs("m").iter().map(|j| j.start_time.unwrap()).collect();
        assert_eq!(starts.into_iter().collect::<Vec<_>>(), vec![secs(1.0), secs(2.0)]);
    }

    #[test]
    fn synthetic_job_past_walltime_errors() {
        let tb = Testbed::new([machine(1)]).unwrap();
        let mut s = spec(1, WorkModel::Synthetic(secs(10.0)));
        s.walltime = secs(5.0);
        let id = tb.submit_job("m", s).unwrap();
        tb.run_until_idle().unwrap();
        let job = tb.query_job("m", id).unwrap();
        assert_eq!(job.state, JobState::Error);
        assert_eq!(job.detail, "walltime exceeded");
        assert_eq!(job.end_time.unwrap() - job.start_time.unwrap(), secs(5.0));
    }

    #[test]
    fn cancel_pending_and_running() {
        let tb = Testbed::new([machine(8)]).unwrap();
        let running = tb.submit_job("m", spec(4, WorkModel::Synthetic(secs(100.0)))).unwrap();
        tb.advance_to(secs(3.0)).unwrap();
        let pending = tb.submit_job("m", noop()).unwrap();
        assert_eq!(tb.machine_summary("m").unwrap().free_nodes, 4);
        tb.cancel_job("m", running).unwrap();
        assert_eq!(tb.machine_summary("m").unwrap().free_nodes, 8);
        tb.cancel_job("m", pending).unwrap();
        assert_eq!(tb.cancel_job("m", pending), Err(ConnectorError::AlreadyFinished(pending)));
        tb.run_until_idle().unwrap();
        let p = tb.query_job("m", pending).unwrap();
        assert_eq!(p.state, JobState::Cancelled);
        assert!(p.start_time.is_none());
        assert_eq!(tb.query_job("m", running).unwrap().end_time, Some(secs(3.0)));
        assert!(matches!(tb.query_job("m", JobId(99)), Err(ConnectorError::UnknownJob(_))));
        assert!(matches!(tb.query_job("x", running), Err(ConnectorError::UnknownMachine(_))));
    }

    #[test]
    fn oversized_and_empty_jobs_rejected() {
        let tb = Testbed::new([machine(2)]).unwrap();
        assert_eq!(
            tb.submit_job("m", spec(3, WorkModel::Noop)),
            Err(SubmitError::TooLarge { nodes: 3, available: 2 })
        );
        assert!(matches!(tb.submit_job("m", spec(0, WorkModel::Noop)), Err(SubmitError::Invalid(_))));
        assert!(matches!(tb.submit_job("zz", noop()), Err(SubmitError::UnknownMachine(_))));
    }

    #[test]
    fn livelock_guard_trips() {
        let tb = Testbed::new([machine(1)]).unwrap();
        tb.set_max_events(3);
        for _ in 0..5 {
            tb.submit_job("m", noop()).unwrap();
        }
        assert!(matches!(tb.run_until_idle(), Err(ConnectorError::LivelockGuard(3))));
    }

    #[test]
    fn csv_log_has_header_and_rows() {
        let tb = Testbed::new([machine(1)]).unwrap();
        tb.submit_job("m", noop()).unwrap();
        tb.run_until_idle().unwrap();
        let csv = tb.event_log_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "time,seq,kind,job_id,detail");
        let kinds: Vec<_> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap()).collect();
        assert_eq!(kinds, ["SUBMIT", "QUEUED", "START", "COMPLETE"]);
    }

    #[test]
    fn boundaries_are_strictly_after_now() {
        assert_eq!(next_boundary(Duration::ZERO, secs(1.0)), secs(1.0));
        assert_eq!(next_boundary(secs(1.0), secs(1.0)), secs(2.0));
        assert_eq!(next_boundary(secs(1.5), secs(1.0)), secs(2.0));
        assert_eq!(next_boundary(secs(0.3), secs(0.25)), secs(0.5));
    }
}
