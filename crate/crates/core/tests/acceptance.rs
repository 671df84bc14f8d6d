//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use support::*;
use urgentflow::bench::{csv_string, doubling, run_one, ExperimentConfig, RunRecord, Strategy};
use urgentflow::engine::{Engine, WorkflowKind, WorkflowStage};
use urgentflow::machine::{MachineConfig, WorkModel};
use urgentflow::platform::Platform;
use urgentflow::runner::{
    concretise, pack_members, parse_parameters, parse_workflow, BindingSource, Provenance, RunnerError, Value,
};
use urgentflow::simulation::{Callback, SimStatus, SimulationRequest};

/// Absolute tolerance for virtual-time comparisons.
const TIME_EPS: f64 = 1e-9;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(cfg: &ExperimentConfig, s: Strategy, n: u64) -> Result<RunRecord, String> {
    run_one(cfg, s, n).map_err(|e| format!("{s} N={n}: {e}"))
}

fn packing_counts() -> Outcome {
    let a = pack_members(2048, 1, 128).map_err(|e| e.to_string())?.len();
    ensure(a == 16, || format!("pack(2048,1,128) gave {a} node jobs, want 16"))?;
    let b = pack_members(1024, 8, 128).map_err(|e| e.to_string())?.len();
    ensure(b == 64, || format!("pack(1024,8,128) gave {b} node jobs, want 64"))?;
    let fine = run(&ExperimentConfig::fig5(), Strategy::FineGrained, 2048)?;
    ensure(fine.jobs_submitted == 2048, || format!("FINE_GRAINED N=2048 submitted {}", fine.jobs_submitted))?;
    let scatter = run(&ExperimentConfig::fig5(), Strategy::Scatter, 2048)?;
    ensure(scatter.jobs_submitted == 16, || format!("SCATTER N=2048 submitted {}", scatter.jobs_submitted))?;
    let mpi = run(&ExperimentConfig::fig6(), Strategy::MpiOnly, 1024)?;
    ensure(mpi.nodes_used == 1024, || format!("MPI_ONLY N=1024 used {} nodes", mpi.nodes_used))?;
    let mpis = run(&ExperimentConfig::fig6(), Strategy::MpiScatter, 1024)?;
    ensure(mpis.nodes_used == 64, || format!("MPI_SCATTER N=1024 used {} nodes", mpis.nodes_used))?;
    Ok("16 / 64 node jobs; 2048 fine-grained jobs; 1024 vs 64 nodes at N=1024".into())
}

fn queue_caps() -> Outcome {
    let mut total = Peaks::default();
    for seed in 1..=5 {
        let w = random_workload(seed, 300);
        let log = w.platform.testbed.event_log();
        let p = audit(&log);
        ensure(p.events >= 1000, || format!("seed {seed}: only {} events", p.events))?;
        ensure(p.running <= 16, || format!("seed {seed}: {} running at once", p.running))?;
        ensure(p.in_system <= 64, || format!("seed {seed}: {} in system at once", p.in_system))?;
        let stuck = w
            .platform
            .simulations
            .simulations_for(&w.incident)
            .into_iter()
            .filter(|s| !s.status.is_terminal())
            .count();
        ensure(stuck == 0, || format!("seed {seed}: {stuck} simulations never finished"))?;
        total.events += p.events;
        total.rejects += p.rejects;
        total.running = total.running.max(p.running);
        total.in_system = total.in_system.max(p.in_system);
    }
    ensure(total.rejects > 0, || "caps never bound; workload too small".into())?;

    // the 65th simultaneous submission
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let engine = Engine::builder()
        .kind(WorkflowKind::new("k", vec![WorkflowStage::new("s", "q", |_| Ok(()))], "q"))
        .build()
        .map_err(|e| e.to_string())?;
    let platform = Platform::new(engine, vec![MachineConfig::new("hpc", 1024, root.path().join("hpc"))])
        .map_err(|e| e.to_string())?;
    let inc = platform.engine.create_incident("i", "k").map_err(|e| e.to_string())?;
    platform.engine.activate_incident(&inc).map_err(|e| e.to_string())?;
    let mut ids = Vec::new();
    for _ in 0..65 {
        let id = platform
            .simulations
            .create_simulation(
                SimulationRequest::new(inc.clone(), 128, "01:00:00", "x.sh")
                    .work(WorkModel::Synthetic(Duration::from_secs(300))),
            )
            .map_err(|e| e.to_string())?;
        platform.simulations.submit_simulation(&id).map_err(|e| e.to_string())?;
        ids.push(id);
    }
    let last = platform.simulations.get_simulation(&ids[64]).unwrap();
    ensure(last.deferred && last.status == SimStatus::Created, || {
        format!("65th submission: status {} deferred {}", last.status, last.deferred)
    })?;
    ensure(platform.simulations.deferred_count() == 1, || "deferred list should hold one".into())?;
    let first64 = ids[..64]
        .iter()
        .all(|id| platform.simulations.get_simulation(id).unwrap().status == SimStatus::Queued);
    ensure(first64, || "first 64 submissions should be queued".into())?;
    platform.run_until_idle().map_err(|e| e.to_string())?;
    let all_done = ids
        .iter()
        .all(|id| platform.simulations.get_simulation(id).unwrap().status == SimStatus::Completed);
    ensure(all_done && platform.simulations.deferred_count() == 0, || {
        "deferred submission was not released".into()
    })?;
    let p = audit(&platform.testbed.event_log());
    ensure(p.running <= 16 && p.in_system <= 64, || format!("{p:?}"))?;
    Ok(format!(
        "{} events audited over 5 random workloads, peak {} running / {} in system, {} rejections absorbed; 65th submission deferred then released",
        total.events, total.running, total.in_system, total.rejects
    ))
}

fn fig5_structure() -> Outcome {
    let cfg = ExperimentConfig::fig5();
    let l = cfg.machine.submission_latency.as_secs_f64();
    let mut fine = BTreeMap::new();
    for n in doubling(16, 2048) {
        let f = run(&cfg, Strategy::FineGrained, n)?;
        let s = run(&cfg, Strategy::Scatter, n)?;
        let (fo, so) = (fine_grained_last_queued(n, l), scatter_last_queued(n, 128, l));
        ensure((f.time_last_queued - fo).abs() <= TIME_EPS, || {
            format!("FINE_GRAINED N={n}: {} vs oracle {fo}", f.time_last_queued)
        })?;
        ensure((s.time_last_queued - so).abs() <= TIME_EPS, || {
            format!("SCATTER N={n}: {} vs oracle {so}", s.time_last_queued)
        })?;
        fine.insert(n, (f.time_last_queued, s.time_last_queued));
    }
    let (f64_, _) = fine[&64];
    let (f128, _) = fine[&128];
    ensure(f128 > 2.0 * f64_, || format!("no jump: t(128)={f128} t(64)={f64_}"))?;
    let per_member: Vec<f64> = fine.iter().filter(|(n, _)| **n >= 64).map(|(n, (t, _))| t / *n as f64).collect();
    ensure(per_member.windows(2).all(|w| w[1] > w[0]), || "not superlinear past 64".into())?;
    let (f2048, s2048) = fine[&2048];
    let ratio = f2048 / s2048;
    ensure(ratio >= 100.0, || format!("ratio at 2048 is {ratio}"))?;
    Ok(format!(
        "matches closed form at 8 sizes; t(128)/t(64) = {:.2}; FINE/SCATTER at 2048 = {ratio:.0}",
        f128 / f64_
    ))
}

fn fig6_orderings() -> Outcome {
    let cfg = ExperimentConfig::fig6();
    let m = cfg.runtime_model;
    let offset = (cfg.machine.submission_latency + cfg.machine.scheduler_cycle).as_secs_f64();
    for (s, c) in [(Strategy::ScatterOnly, 1), (Strategy::MpiScatter, 8), (Strategy::MpiOnly, 128)] {
        let r = run(&cfg, s, 1)?;
        let t = model_runtime(m.t1, m.serial_fraction, m.overhead_per_core, c);
        ensure((r.total_runtime - offset - t).abs() <= 1e-6, || {
            format!("{s} N=1 runtime {} != T({c}) + {offset} = {}", r.total_runtime, t + offset)
        })?;
    }
    let mut rows = Vec::new();
    for n in doubling(1, 1024) {
        let ms = run(&cfg, Strategy::MpiScatter, n)?.total_runtime;
        let so = run(&cfg, Strategy::ScatterOnly, n)?.total_runtime;
        let mo = run(&cfg, Strategy::MpiOnly, n)?.total_runtime;
        ensure(so > ms, || format!("N={n}: SCATTER_ONLY {so} not slower than MPI_SCATTER {ms}"))?;
        if n <= 16 {
            ensure(mo < ms, || format!("N={n}: MPI_ONLY {mo} not faster than MPI_SCATTER {ms}"))?;
        }
        if n >= 128 {
            ensure(mo > ms, || format!("N={n}: MPI_ONLY {mo} not slower than MPI_SCATTER {ms}"))?;
        }
        rows.push(n);
    }
    Ok(format!("all three orderings hold at {} sizes (model {m})", rows.len()))
}

fn two_phase_protocol() -> Outcome {
    for i in 0..100 {
        let seen = two_phase_run().map_err(|e| format!("run {i}: {e}"))?;
        ensure(seen.len() == 1, || format!("run {i}: {} callbacks", seen.len()))?;
        let cb: Callback = serde_json::from_slice(&seen[0]).map_err(|e| format!("run {i}: bad callback: {e}"))?;
        ensure(cb.status == SimStatus::Completed, || format!("run {i}: callback status {}", cb.status))?;
    }
    Ok("100/100 runs: job read the staged config, one COMPLETED callback each".into())
}

fn engine_properties() -> Outcome {
    let out = concurrent_senders(8, 100, 4);
    ensure(out.started.len() == 800, || format!("{} handler starts for 800 messages", out.started.len()))?;
    let unique: BTreeSet<_> = out.started.iter().collect();
    ensure(unique.len() == 800, || format!("{} duplicate dispatches", 800 - unique.len()))?;
    ensure(out.started.windows(2).all(|w| w[0] < w[1]), || "per-queue FIFO violated".into())?;
    let sent: BTreeSet<_> = out.sent.iter().flatten().collect();
    ensure(sent == unique, || "dispatched set differs from sent set".into())?;
    for (t, ids) in out.sent.iter().enumerate() {
        let payloads: Vec<&String> = ids.iter().map(|id| &out.payloads[id]).collect();
        let want: Vec<String> = (0..100).map(|i| format!("{t}:{i}")).collect();
        ensure(payloads.iter().zip(&want).all(|(a, b)| *a == b), || format!("sender {t} payloads mixed up"))?;
    }

    // crash and restart from the store
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = dir.path().join("engine.log");
    let hits = Arc::new(AtomicUsize::new(0));
    let kind = |hits: Arc<AtomicUsize>| {
        WorkflowKind::new(
            "flood",
            vec![
                WorkflowStage::new("entry", "entry", |ctx| {
                    ctx.kv_put("seen", b"1".to_vec())?;
                    Ok(())
                }),
                WorkflowStage::new("work", "work", move |_| {
                    hits.fetch_add(1, Ordering::SeqCst);
                    Ok(())
                }),
            ],
            "entry",
        )
    };
    let (digest, queued) = {
        let engine = Engine::builder()
            .kind(kind(Arc::clone(&hits)))
            .store(&store)
            .build()
            .map_err(|e| e.to_string())?;
        let mut incs = Vec::new();
        for i in 0..3 {
            let inc = engine.create_incident(&format!("i{i}"), "flood").map_err(|e| e.to_string())?;
            engine.activate_incident(&inc).map_err(|e| e.to_string())?;
            incs.push(inc);
        }
        engine.run_pending();
        for inc in &incs {
            for j in 0..10 {
                engine.send_message("work", inc, vec![j], "external").map_err(|e| e.to_string())?;
            }
        }
        engine.run_pending();
        engine.complete_incident(&incs[2]).map_err(|e| e.to_string())?;
        for inc in &incs[..2] {
            for j in 0..7 {
                engine.send_message("work", inc, vec![j], "external").map_err(|e| e.to_string())?;
            }
        }
        (engine.state_digest(), engine.pending_count())
    };
    let before = hits.load(Ordering::SeqCst);
    let restored = Engine::builder()
        .kind(kind(Arc::clone(&hits)))
        .store(&store)
        .build()
        .map_err(|e| e.to_string())?;
    ensure(restored.state_digest() == digest, || "state digest changed across restart".into())?;
    let replayed = restored.run_pending();
    ensure(replayed == queued && queued == 14, || format!("replayed {replayed} of {queued} queued messages"))?;
    ensure(hits.load(Ordering::SeqCst) - before == 14, || "replay was not exactly once".into())?;
    ensure(restored.run_pending() == 0, || "messages dispatched twice".into())?;
    Ok("800 messages from 8 senders: no duplicates, FIFO kept; restart digest identical, 14 queued messages replayed once".into())
}

fn des_determinism() -> Outcome {
    let reference = random_workload(42, 200).platform.testbed.event_log_csv();
    for i in 1..10 {
        let again = random_workload(42, 200).platform.testbed.event_log_csv();
        ensure(again == reference, || format!("run {i} event log differs"))?;
    }
    let cfg = ExperimentConfig::fig5();
    let bench_ref = csv_string(&[run(&cfg, Strategy::FineGrained, 256)?]).map_err(|e| e.to_string())?;
    for i in 1..10 {
        let again = csv_string(&[run(&cfg, Strategy::FineGrained, 256)?]).map_err(|e| e.to_string())?;
        ensure(again == bench_ref, || format!("bench run {i} differs"))?;
    }
    Ok(format!(
        "10 runs byte-identical ({} byte event log); 10 bench runs identical",
        reference.len()
    ))
}

fn runner_properties() -> Outcome {
    let mut r = rng(8);
    let mut rejected = 0;
    for i in 0..10_000 {
        let n = r.gen_range(0..=2048usize);
        let m = r.gen_range(1..=160u32);
        let c = r.gen_range(1..=256u32);
        let got = pack_members(n, m, c);
        match (greedy_pack(n, m, c), got) {
            (Some(want), Ok(jobs)) => {
                let got: Vec<Vec<usize>> = jobs.into_iter().map(|j| j.members_assigned).collect();
                ensure(got == want, || format!("triple {i}: pack({n},{m},{c}) differs from greedy"))?;
            }
            (None, Err(RunnerError::MemberTooWide { .. })) => rejected += 1,
            (want, got) => return Err(format!("triple {i}: pack({n},{m},{c}) = {got:?}, oracle {want:?}")),
        }
    }

    let mut r = rng(9);
    for i in 0..100 {
        let (text, deps) = random_cyclic_workflow(&mut r);
        match parse_workflow(&text) {
            Err(RunnerError::CycleDetected(c)) => {
                ensure(is_cycle(&c, &deps), || format!("graph {i}: reported {c:?} is not a cycle"))?
            }
            other => return Err(format!("graph {i}: cycle missed ({:?})", other.map(|w| w.workflow_id))),
        }
    }

    let wf = parse_workflow(
        "id: p\ninputs:\n  a:\n    type: int\n    default: 1\n  b:\n    type: int\n    default: 1\n  c:\n    type: int\n    default: 1\nsteps:\n  s:\n    run: x {a} {b} {c}\n    in:\n      a: a\n      b: b\n      c: c\n",
    )
    .map_err(|e| e.to_string())?;
    let scen = parse_parameters("a: 3\n", Provenance::Scenario).map_err(|e| e.to_string())?;
    let mach = parse_parameters("a: 2\nb: 2\n", Provenance::Machine).map_err(|e| e.to_string())?;
    let plan = concretise(&wf, &scen, &mach).map_err(|e| e.to_string())?;
    let got: Vec<_> = ["a", "b", "c"]
        .iter()
        .map(|k| (plan.bindings[*k].value.clone(), plan.bindings[*k].source))
        .collect();
    let want = vec![
        (Some(Value::Int(3)), BindingSource::Scenario),
        (Some(Value::Int(2)), BindingSource::Machine),
        (Some(Value::Int(1)), BindingSource::Default),
    ];
    ensure(got == want, || format!("precedence {got:?}"))?;
    ensure(plan.steps[0].members[0].command == "x 3 2 1", || plan.steps[0].members[0].command.clone())?;
    Ok(format!(
        "10000 packing triples match greedy ({rejected} too-wide rejections); 100/100 cycles found; scenario > machine > default"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("packing counts", packing_counts),
        ("queue-cap safety", queue_caps),
        ("time to last job queued", fig5_structure),
        ("total runtime orderings", fig6_orderings),
        ("two-phase create/stage/submit", two_phase_protocol),
        ("engine dispatch and restart", engine_properties),
        ("event log determinism", des_determinism),
        ("runner packing, cycles, precedence", runner_properties),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let ms = t.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} ({ms} ms)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} ({ms} ms)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
