use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench")).args(args).output().unwrap()
}

fn runner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_runner")).args(args).output().unwrap()
}

fn sample(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../samples/ensemble")
        .join(name)
        .display()
        .to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn fig5_writes_sorted_csv_and_passes_checks() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = bench(&["fig5", "--n", "16,32,...,2048", "--latency", "1.0", "--cycle", "1.0", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let csv = std::fs::read_to_string(&a).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "strategy,n,jobs,nodes,time_last_queued,total_runtime,deferred");
    assert_eq!(lines.len(), 17);
    assert!(lines[1].starts_with("FINE_GRAINED,16,"));
    assert!(lines[16].starts_with("SCATTER,2048,16,16,"));
    assert_eq!(csv, std::fs::read_to_string(&b).unwrap());
}

#[test]
fn fig6_default_model_passes_checks() {
    let o = bench(&["fig6", "--n", "1,2,...,1024"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 11);
}

#[test]
fn fig6_with_wide_optimum_model_fails_its_checks() {
    // optimum near 26 cores: MPI only never beats 8-core members
    let o = bench(&["fig6", "--n", "1,2,4,8,16", "--model", "t1=64,f=0.01,beta=0.09"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("check failed"), "{}", stderr(&o));
}

#[test]
fn bench_rejects_bad_arguments() {
    assert_eq!(bench(&["fig5", "--n", "16,24,...,2048"]).status.code(), Some(2));
    assert_eq!(bench(&["fig5", "--n", "0"]).status.code(), Some(2));
    assert_eq!(bench(&["fig6", "--model", "f=3"]).status.code(), Some(2));
    assert_eq!(bench(&["fig5", "--strategies", "MPI_ONLY"]).status.code(), Some(2));
    assert_eq!(bench(&["fig6", "--mpi-cores", "129"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nope/x.csv");
    let o = bench(&["fig5", "--n", "16", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runner_runs_sample_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let report = dir.path().join("report.json");
    let o = runner(&[
        "run",
        "--workflow",
        &sample("workflow.yml"),
        "--scenario",
        &sample("scenario.yml"),
        "--machine",
        &sample("machine.yml"),
        "--workdir",
        work.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(work.join("combine/summary")).unwrap();
    assert_eq!(summary.matches("B0z0.0").count(), 5);
    assert!(summary.contains("member 4 on 8 cores"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["status"], "COMPLETED");
    // 5 members of 8 cores on 16-core nodes
    assert_eq!(r["steps"][1]["node_jobs"].as_array().unwrap().len(), 3);
}

#[test]
fn runner_plan_reports_binding_sources() {
    let o = runner(&[
        "plan",
        "--workflow",
        &sample("workflow.yml"),
        "--scenario",
        &sample("scenario.yml"),
        "--machine",
        &sample("machine.yml"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan["bindings"]["width"]["source"], "SCENARIO");
    assert_eq!(plan["cores_per_node"], 16);

    let o = runner(&["check", "--workflow", &sample("workflow.yml")]);
    assert!(o.status.success());
}

#[test]
fn runner_member_failure_exits_one_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let wf = dir.path().join("wf.yml");
    std::fs::write(
        &wf,
        "id: f\ninputs:\n  xs: array<int>\nsteps:\n  s:\n    run: test {x} -ne 2\n    in:\n      x: xs\n    scatter:\n      over: x\n      cores_per_member: 1\n",
    )
    .unwrap();
    let scen = dir.path().join("s.yml");
    std::fs::write(&scen, "xs: [0, 1, 2, 3, 4]\n").unwrap();
    let mach = dir.path().join("m.yml");
    std::fs::write(&mach, "cores_per_node: 2\n").unwrap();
    let report = dir.path().join("r.json");
    let o = runner(&[
        "run",
        "--workflow",
        wf.to_str().unwrap(),
        "--scenario",
        scen.to_str().unwrap(),
        "--machine",
        mach.to_str().unwrap(),
        "--workdir",
        dir.path().join("w").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("member 2"), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["status"], "FAILED");
    assert_eq!(r["failure"]["member"], 2);
}

#[test]
fn runner_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cyclic: PathBuf = dir.path().join("c.yml");
    std::fs::write(
        &cyclic,
        "id: c\nsteps:\n  a:\n    run: x {p}\n    in:\n      p: b/o\n    out: [o]\n  b:\n    run: y {q}\n    in:\n      q: a/o\n    out: [o]\n",
    )
    .unwrap();
    let o = runner(&["check", "--workflow", cyclic.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cycle"), "{}", stderr(&o));
    let o = runner(&["plan", "--workflow", &sample("workflow.yml")]);
    assert_eq!(o.status.code(), Some(2), "unbound required inputs");
}
