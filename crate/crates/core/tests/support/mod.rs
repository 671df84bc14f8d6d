//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urgentflow::data::PutRequest;
use urgentflow::engine::{Engine, WorkflowKind, WorkflowStage};
use urgentflow::machine::{MachineConfig, WorkModel};
use urgentflow::platform::Platform;
use urgentflow::simulation::{SimStatus, SimulationRequest};
use urgentflow::testbed::{LogKind, LogRecord};
use urgentflow::{IncidentId, MessageId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- oracles

/// Time the last of `n` one-node jobs is queued when every attempt costs
/// `l` seconds on a serial channel and 64 jobs fit in the system. Jobs
/// finish the instant they start, so after the first 64 the channel
/// alternates rejected attempt / accepted attempt.
pub fn fine_grained_last_queued(n: u64, l: f64) -> f64 {
    if n <= 64 {
        n as f64 * l
    } else {
        (2 * n - 64) as f64 * l
    }
}

/// Packed strategies: one submission per node job.
pub fn scatter_last_queued(n: u64, per_node: u64, l: f64) -> f64 {
    n.div_ceil(per_node) as f64 * l
}

/// Greedy node packing: fill each node with floor(c/m) members in index order.
pub fn greedy_pack(n: usize, m: u32, c: u32) -> Option<Vec<Vec<usize>>> {
    if m == 0 || m > c {
        return None;
    }
    let per = (c / m) as usize;
    let mut out: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        match out.last_mut() {
            Some(node) if node.len() < per => node.push(i),
            _ => out.push(vec![i]),
        }
    }
    Some(out)
}

pub fn model_runtime(t1: f64, f: f64, beta: f64, c: u32) -> f64 {
    let c = f64::from(c);
    t1 * (f + (1.0 - f) / c) + beta * (c - 1.0)
}

// ----------------------------------------------------------- cap audit

#[derive(Debug, Default, Clone, Copy)]
pub struct Peaks {
    pub running: usize,
    pub in_system: usize,
    pub events: usize,
    pub rejects: usize,
}

/// Replays an event log and returns the largest RUNNING and in-system
/// counts it implies.
pub fn audit(log: &[LogRecord]) -> Peaks {
    let mut in_system: HashSet<u64> = HashSet::new();
    let mut running: HashSet<u64> = HashSet::new();
    let mut p = Peaks {
        events: log.len(),
        ..Peaks::default()
    };
    let mut last = (Duration::ZERO, 0u64);
    for r in log {
        assert!((r.time, r.seq) >= last, "log out of order at seq {}", r.seq);
        last = (r.time, r.seq);
        let job = r.job_id.map(|j| j.0);
        match (r.kind, job) {
            (LogKind::Submit, Some(j)) => {
                in_system.insert(j);
            }
            (LogKind::Start, Some(j)) => {
                running.insert(j);
            }
            (LogKind::Complete | LogKind::Error | LogKind::Cancel, Some(j)) => {
                in_system.remove(&j);
                running.remove(&j);
            }
            (LogKind::Reject, _) => p.rejects += 1,
            _ => {}
        }
        p.running = p.running.max(running.len());
        p.in_system = p.in_system.max(in_system.len());
    }
    p
}

pub struct Workload {
    pub platform: Arc<Platform>,
    pub incident: IncidentId,
    _root: tempfile::TempDir,
}

fn audit_kind() -> WorkflowKind {
    WorkflowKind::new(
        "audit",
        vec![
            WorkflowStage::new("start", "start", |_| Ok(())),
            WorkflowStage::new("done", "done", |_| Ok(())),
        ],
        "start",
    )
}

/// Random mix of simulation submissions, waits and cancellations on one
/// default-capped machine, driven to completion.
pub fn random_workload(seed: u64, sims: usize) -> Workload {
    let root = tempfile::tempdir().unwrap();
    let engine = Engine::builder().kind(audit_kind()).build().unwrap();
    let platform = Platform::new(engine, vec![MachineConfig::new("hpc", 256, root.path().join("hpc"))]).unwrap();
    let inc = platform.engine.create_incident("audit", "audit").unwrap();
    platform.engine.activate_incident(&inc).unwrap();
    platform.engine.run_pending();
    let mut r = rng(seed);
    let mut live = Vec::new();
    let mut made = 0;
    while made < sims {
        let burst = r.gen_range(1..=40).min(sims - made);
        for _ in 0..burst {
            let cores = r.gen_range(1..=512);
            let work = match r.gen_range(0..4) {
                0 => WorkModel::Noop,
                _ => WorkModel::Synthetic(Duration::from_secs(r.gen_range(1..=120))),
            };
            let req = SimulationRequest::new(inc.clone(), cores, "01:00:00", "job.sh")
                .callback(SimStatus::Completed, "done")
                .work(work);
            let id = platform.simulations.create_simulation(req).unwrap();
            platform.simulations.submit_simulation(&id).unwrap();
            live.push(id);
            made += 1;
        }
        if r.gen_bool(0.1) && !live.is_empty() {
            let victim = live.swap_remove(r.gen_range(0..live.len()));
            let _ = platform.simulations.cancel_simulation(&victim);
        }
        let target = platform.testbed.now() + Duration::from_secs(r.gen_range(0..=60));
        platform.testbed.advance_to(target).unwrap();
        platform.engine.run_pending();
    }
    platform.run_until_idle().unwrap();
    Workload {
        platform,
        incident: inc,
        _root: root,
    }
}

// -------------------------------------------------- two-phase protocol

/// Workflow: a `launch` stage creates a simulation from a template, puts
/// `myconfig` into its directory through the data manager and submits it;
/// the COMPLETED callback lands on `done`. The job script fails unless it
/// can read the config. Returns the callback payloads seen on `done`.
pub fn two_phase_run() -> Result<Vec<Vec<u8>>, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let template = root.path().join("templates/mysimulation");
    fs::create_dir_all(&template).map_err(|e| e.to_string())?;
    fs::write(
        template.join("submit.sh"),
        "grep -qx 'cells: 42' myconfig || exit 3\ncp myconfig observed\n",
    )
    .map_err(|e| e.to_string())?;

    let seen: Arc<Mutex<Vec<Vec<u8>>>> = Arc::default();
    let sink = Arc::clone(&seen);
    let tpl = template.clone();
    let kind = WorkflowKind::new(
        "two-phase",
        vec![
            WorkflowStage::new("launch", "launch", move |ctx| {
                let p = ctx.service::<Platform>().ok_or("no platform")?;
                let sim_id = p.simulations.create_simulation(
                    SimulationRequest::new(ctx.incident_id().clone(), 120, "00:15:00", "submit.sh")
                        .description("Example simulation")
                        .callback(SimStatus::Completed, "callback")
                        .template(&tpl),
                )?;
                let sim = p.simulations.get_simulation(&sim_id).ok_or("simulation vanished")?;
                p.data.put_byte_data(
                    PutRequest::new(ctx.incident_id().clone(), "myconfig", &sim.machine_name, &sim.directory)
                        .description("Simulation configuration")
                        .mime_type("text/plain"),
                    b"cells: 42\n",
                )?;
                p.simulations.submit_simulation(&sim_id)?;
                Ok(())
            }),
            WorkflowStage::new("callback", "callback", move |ctx| {
                sink.lock().unwrap().push(ctx.payload().to_vec());
                Ok(())
            }),
        ],
        "launch",
    );
    let engine = Engine::builder().kind(kind).build().map_err(|e| e.to_string())?;
    let platform = Platform::new(engine, vec![MachineConfig::new("archer", 16, root.path().join("archer"))])
        .map_err(|e| e.to_string())?;
    let inc = platform.engine.create_incident("storm", "two-phase").map_err(|e| e.to_string())?;
    platform.engine.activate_incident(&inc).map_err(|e| e.to_string())?;
    platform.run_until_idle().map_err(|e| e.to_string())?;

    let sims = platform.simulations.simulations_for(&inc);
    let [sim] = sims.as_slice() else {
        return Err(format!("expected one simulation, found {}", sims.len()));
    };
    if sim.status != SimStatus::Completed {
        return Err(format!("simulation ended {} ({})", sim.status, sim.detail));
    }
    if sim.nodes != 1 {
        return Err(format!("120 cores should fit one 128-core node, got {}", sim.nodes));
    }
    let observed = fs::read(sim.directory.join("observed")).map_err(|e| format!("job did not see config: {e}"))?;
    if observed != b"cells: 42\n" {
        return Err("job copied the wrong config".into());
    }
    if !sim.directory.join("submit.sh").is_file() {
        return Err("template not copied".into());
    }
    let failed: Vec<_> = platform
        .engine
        .messages_for(&inc)
        .into_iter()
        .filter(|m| !matches!(m.status, urgentflow::engine::MessageStatus::Completed))
        .collect();
    if !failed.is_empty() {
        return Err(format!("messages not completed: {failed:?}"));
    }
    let seen = seen.lock().unwrap().clone();
    Ok(seen)
}

// ------------------------------------------------- engine concurrency

pub struct ConcurrencyOutcome {
    /// Message ids in the order the handler started them.
    pub started: Vec<MessageId>,
    /// Ids returned to the senders, per sender.
    pub sent: Vec<Vec<MessageId>>,
    /// Payload per message id.
    pub payloads: BTreeMap<MessageId, String>,
}

/// `senders` threads each send `per_sender` messages to one queue while
/// `workers` dispatcher threads run them.
pub fn concurrent_senders(senders: usize, per_sender: usize, workers: usize) -> ConcurrencyOutcome {
    let started: Arc<Mutex<Vec<(MessageId, String)>>> = Arc::default();
    let sink = Arc::clone(&started);
    let engine = Engine::builder()
        .kind(WorkflowKind::new(
            "burst",
            vec![
                WorkflowStage::new("entry", "entry", |_| Ok(())),
                WorkflowStage::new("count", "q", move |ctx| {
                    let p = String::from_utf8(ctx.payload().to_vec())?;
                    sink.lock().unwrap().push((ctx.message().message_id, p));
                    // give other workers a chance to race for the same lane
                    thread::yield_now();
                    Ok(())
                }),
            ],
            "entry",
        ))
        .build()
        .unwrap();
    let inc = engine.create_incident("burst", "burst").unwrap();
    engine.activate_incident(&inc).unwrap();
    let pool = engine.start_workers(workers);
    let sent: Vec<Vec<MessageId>> = thread::scope(|s| {
        let handles: Vec<_> = (0..senders)
            .map(|t| {
                let engine = Arc::clone(&engine);
                let inc = inc.clone();
                s.spawn(move || {
                    (0..per_sender)
                        .map(|i| {
                            engine
                                .send_message("q", &inc, format!("{t}:{i}").into_bytes(), "external")
                                .unwrap()
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(engine.wait_idle(Duration::from_secs(30)), "engine did not drain");
    pool.shutdown();
    let started = started.lock().unwrap().clone();
    ConcurrencyOutcome {
        payloads: started.iter().cloned().collect(),
        started: started.into_iter().map(|(id, _)| id).collect(),
        sent,
    }
}

// ------------------------------------------------------ cyclic graphs

/// A workflow whose steps form a random DAG plus one back edge, so it
/// always contains a cycle. Returns the text and the step dependencies.
pub fn random_cyclic_workflow(r: &mut ChaCha8Rng) -> (String, BTreeMap<String, Vec<String>>) {
    random_workflow(r, true)
}

/// Random step graph; acyclic unless `cyclic`.
pub fn random_workflow(r: &mut ChaCha8Rng, cyclic: bool) -> (String, BTreeMap<String, Vec<String>>) {
    let k = r.gen_range(2..=12);
    let mut deps: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for i in 0..k {
        let mut d: Vec<String> = (0..i).filter(|_| r.gen_bool(0.3)).map(|j| format!("s{j}")).collect();
        if i > 0 && d.is_empty() {
            d.push(format!("s{}", i - 1));
        }
        deps.insert(format!("s{i}"), d);
    }
    if cyclic {
        close_cycle(r, &mut deps, k);
    }
    render_steps(r, &deps)
}

fn close_cycle(r: &mut ChaCha8Rng, deps: &mut BTreeMap<String, Vec<String>>, k: usize) {
    // some ancestor of `hi` now also consumes `hi`
    let hi = r.gen_range(1..k);
    let mut ancestors: Vec<String> = Vec::new();
    let mut stack = deps[&format!("s{hi}")].clone();
    while let Some(n) = stack.pop() {
        if !ancestors.contains(&n) {
            stack.extend(deps[&n].iter().cloned());
            ancestors.push(n);
        }
    }
    ancestors.sort();
    let lo = ancestors[r.gen_range(0..ancestors.len())].clone();
    deps.get_mut(&lo).unwrap().push(format!("s{hi}"));
}

fn render_steps(r: &mut ChaCha8Rng, deps: &BTreeMap<String, Vec<String>>) -> (String, BTreeMap<String, Vec<String>>) {
    let k = deps.len();
    let mut text = String::from("id: cyclic\nsteps:\n");
    let mut order: Vec<usize> = (0..k).collect();
    // declaration order must not matter
    for i in (1..order.len()).rev() {
        order.swap(i, r.gen_range(0..=i));
    }
    for i in order {
        let name = format!("s{i}");
        let d = &deps[&name];
        let placeholders: Vec<String> = (0..d.len()).map(|j| format!("{{p{j}}}")).collect();
        text.push_str(&format!("  {name}:\n    run: step {}\n", placeholders.join(" ")));
        if !d.is_empty() {
            text.push_str("    in:\n");
            for (j, dep) in d.iter().enumerate() {
                text.push_str(&format!("      p{j}: {dep}/o\n"));
            }
        }
        text.push_str("    out: [o]\n");
    }
    (text, deps.clone())
}

/// Whether `cycle` (s_a -> s_b -> ... ) follows dependency edges and closes.
pub fn is_cycle(cycle: &[String], deps: &BTreeMap<String, Vec<String>>) -> bool {
    if cycle.is_empty() {
        return false;
    }
    let n = cycle.len();
    (0..n).all(|i| {
        let (a, b) = (&cycle[i], &cycle[(i + 1) % n]);
        // the runner reports producer -> consumer; accept either direction
        // consistently by checking the whole cycle below
        deps.get(b).is_some_and(|d| d.contains(a))
    }) || (0..n).all(|i| {
        let (a, b) = (&cycle[i], &cycle[(i + 1) % n]);
        deps.get(a).is_some_and(|d| d.contains(b))
    })
}
