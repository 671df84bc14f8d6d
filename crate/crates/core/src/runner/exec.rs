//! Plan execution against a machine connector.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::plan::{ConcretePlan, PlannedStep};
use super::RunnerError;
use crate::ids::JobId;
use crate::machine::{opt_secs, secs, JobSpec, JobState, MachineConnector, MemberTask, SubmitError, WorkModel};

/// How node jobs do their work.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecMode {
    /// Members run as `sh -c <command>` in the working directory.
    Process,
    /// Nothing runs; each node job occupies its node for the given time.
    Modelled { member_runtime: Duration },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Completed,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MemberStatus {
    Completed,
    Failed,
    Cancelled,
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub index: usize,
    pub job_id: Option<JobId>,
    pub status: MemberStatus,
    pub exit_code: Option<i32>,
    pub wall_ms: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeJobReport {
    pub job_id: JobId,
    pub members: Vec<usize>,
    pub state: JobState,
    /// When the job entered the machine's queue.
    #[serde(with = "secs")]
    pub queued_at: Duration,
    #[serde(with = "opt_secs")]
    pub started_at: Option<Duration>,
    #[serde(with = "opt_secs")]
    pub finished_at: Option<Duration>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_id: String,
    pub status: RunStatus,
    #[serde(with = "opt_secs")]
    pub started_at: Option<Duration>,
    #[serde(with = "opt_secs")]
    pub finished_at: Option<Duration>,
    pub node_jobs: Vec<NodeJobReport>,
    pub members: Vec<MemberReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub step_id: String,
    pub member: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub workflow_id: String,
    pub status: RunStatus,
    pub workdir: PathBuf,
    #[serde(with = "secs")]
    pub started_at: Duration,
    #[serde(with = "secs")]
    pub finished_at: Duration,
    pub steps: Vec<StepReport>,
    /// Workflow output name -> absolute path.
    pub outputs: BTreeMap<String, PathBuf>,
    pub failure: Option<FailureSummary>,
}

impl RunReport {
    pub fn node_jobs(&self) -> impl Iterator<Item = &NodeJobReport> {
        self.steps.iter().flat_map(|s| s.node_jobs.iter())
    }

    /// Latest queue entry over all node jobs.
    pub fn time_last_queued(&self) -> Option<Duration> {
        self.node_jobs().map(|j| j.queued_at).max()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// A failed step, with the report of everything that did run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFailure {
    pub step_id: String,
    pub member: Option<usize>,
    pub detail: String,
    pub report: RunReport,
}

fn io_err(path: &Path, e: std::io::Error) -> RunnerError {
    RunnerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Run every step in plan order. Scattered steps submit one job per node
/// and wait for all of them; after a failure no further jobs are submitted,
/// running ones are allowed to finish, and later steps are skipped.
pub fn execute_plan(
    plan: &ConcretePlan,
    connector: &dyn MachineConnector,
    workdir: &Path,
    mode: &ExecMode,
) -> Result<RunReport, RunnerError> {
    fs::create_dir_all(workdir).map_err(|e| io_err(workdir, e))?;
    let workdir = workdir.canonicalize().map_err(|e| io_err(workdir, e))?;
    if *mode == ExecMode::Process {
        for step in &plan.steps {
            let dir = workdir.join(&step.step_id);
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            if step.scattered {
                for out in &step.outputs {
                    let d = dir.join(out);
                    fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
                }
            }
        }
    }
    let started_at = connector.now();
    let mut report = RunReport {
        workflow_id: plan.workflow_id.clone(),
        status: RunStatus::Completed,
        workdir: workdir.clone(),
        started_at,
        finished_at: started_at,
        steps: Vec::new(),
        outputs: plan
            .outputs
            .iter()
            .map(|(k, v)| (k.clone(), workdir.join(v)))
            .collect(),
        failure: None,
    };
    for step in &plan.steps {
        if report.failure.is_some() {
            report.steps.push(StepReport {
                step_id: step.step_id.clone(),
                status: RunStatus::Skipped,
                started_at: None,
                finished_at: None,
                node_jobs: Vec::new(),
                members: Vec::new(),
            });
            continue;
        }
        let (step_report, failure) = run_step(plan, step, connector, &workdir, mode)?;
        report.steps.push(step_report);
        report.failure = failure;
    }
    report.finished_at = connector.now();
    if let Some(f) = report.failure.clone() {
        report.status = RunStatus::Failed;
        return Err(RunnerError::StepFailed(Box::new(StepFailure {
            step_id: f.step_id,
            member: f.member,
            detail: f.detail,
            report,
        })));
    }
    info!(workflow = %plan.workflow_id, "workflow completed");
    Ok(report)
}

fn job_spec(plan: &ConcretePlan, step: &PlannedStep, members: &[usize], workdir: &Path, mode: &ExecMode) -> JobSpec {
    let work = match mode {
        ExecMode::Process => WorkModel::Members(
            members
                .iter()
                .map(|&i| MemberTask {
                    index: i,
                    command: step.members[i].command.clone(),
                    cores: step.cores_per_member,
                })
                .collect(),
        ),
        ExecMode::Modelled { member_runtime } => WorkModel::Synthetic(*member_runtime),
    };
    JobSpec {
        nodes: step.nodes_per_job,
        walltime: step.walltime,
        work,
        owner: Some(format!("{}/{}", plan.workflow_id, step.step_id)),
        workdir: (*mode == ExecMode::Process).then(|| workdir.to_path_buf()),
    }
}

fn run_step(
    plan: &ConcretePlan,
    step: &PlannedStep,
    connector: &dyn MachineConnector,
    workdir: &Path,
    mode: &ExecMode,
) -> Result<(StepReport, Option<FailureSummary>), RunnerError> {
    let started = connector.now();
    let mut pending: VecDeque<usize> = (0..step.node_jobs.len()).collect();
    let mut outstanding: Vec<(JobId, usize)> = Vec::new();
    let mut job_reports: Vec<NodeJobReport> = Vec::new();
    let mut member_reports: BTreeMap<usize, MemberReport> = BTreeMap::new();
    let mut failure: Option<FailureSummary> = None;

    loop {
        while failure.is_none() {
            let Some(&j) = pending.front() else { break };
            let members = &step.node_jobs[j].members_assigned;
            match connector.submit(job_spec(plan, step, members, workdir, mode)) {
                Ok(id) => {
                    outstanding.push((id, j));
                    pending.pop_front();
                }
                Err(SubmitError::QueueFull) if !outstanding.is_empty() => break,
                Err(SubmitError::QueueFull) => {
                    return Err(RunnerError::invalid(
                        &step.step_id,
                        "machine queue is full of jobs this run does not own",
                    ))
                }
                Err(e) => return Err(RunnerError::invalid(&step.step_id, e.to_string())),
            }
        }
        if outstanding.is_empty() {
            break;
        }
        let ids: Vec<JobId> = outstanding.iter().map(|(id, _)| *id).collect();
        let done = connector.wait_any(&ids)?;
        for id in done {
            let pos = outstanding.iter().position(|(o, _)| *o == id).expect("waited on own job");
            let (_, j) = outstanding.swap_remove(pos);
            let job = connector.query(id)?;
            let members = step.node_jobs[j].members_assigned.clone();
            for &m in &members {
                let result = job.members.iter().find(|r| r.index == m);
                let status = match (job.state, result) {
                    (_, Some(r)) if r.success => MemberStatus::Completed,
                    (_, Some(_)) => MemberStatus::Failed,
                    (JobState::Completed, None) => MemberStatus::Completed,
                    (JobState::Cancelled, None) => MemberStatus::Cancelled,
                    (_, None) => MemberStatus::Failed,
                };
                member_reports.insert(
                    m,
                    MemberReport {
                        index: m,
                        job_id: Some(id),
                        status,
                        exit_code: result.and_then(|r| r.exit_code),
                        wall_ms: result.map_or(0, |r| r.wall_ms),
                        detail: result.map_or_else(|| job.detail.clone(), |r| r.detail.clone()),
                    },
                );
            }
            if job.state != JobState::Completed && failure.is_none() {
                let member = members
                    .iter()
                    .copied()
                    .find(|m| member_reports[m].status == MemberStatus::Failed && !job.members.is_empty());
                warn!(step = %step.step_id, job = %id, detail = %job.detail, "node job failed");
                failure = Some(FailureSummary {
                    step_id: step.step_id.clone(),
                    member,
                    detail: if job.detail.is_empty() {
                        format!("job {id} ended {}", job.state.as_str())
                    } else {
                        job.detail.clone()
                    },
                });
            }
            job_reports.push(NodeJobReport {
                job_id: id,
                members,
                state: job.state,
                queued_at: job.submit_time,
                started_at: job.start_time,
                finished_at: job.end_time,
                detail: job.detail.clone(),
            });
        }
    }
    for m in 0..step.members.len() {
        member_reports.entry(m).or_insert_with(|| MemberReport {
            index: m,
            job_id: None,
            status: MemberStatus::NotRun,
            exit_code: None,
            wall_ms: 0,
            detail: String::new(),
        });
    }
    if failure.is_none() && *mode == ExecMode::Process && !step.scattered {
        if let Some(missing) = step
            .outputs
            .iter()
            .find(|o| !workdir.join(&step.step_id).join(o).is_file())
        {
            failure = Some(FailureSummary {
                step_id: step.step_id.clone(),
                member: None,
                detail: format!("declared output `{missing}` was not produced"),
            });
        }
    }
    job_reports.sort_by_key(|j| j.job_id);
    let report = StepReport {
        step_id: step.step_id.clone(),
        status: if failure.is_some() { RunStatus::Failed } else { RunStatus::Completed },
        started_at: Some(started),
        finished_at: Some(connector.now()),
        node_jobs: job_reports,
        members: member_reports.into_values().collect(),
    };
    Ok((report, failure))
}
