use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crowdfleet::instance::{DemandCurve, Fleet, Instance};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdfleet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_instance(dir: &Path) -> PathBuf {
    let mut inst = Instance::single_zone(20.0, 2.0);
    inst.gw.active_share = 0.5;
    inst.demand = DemandCurve::Geometric { total_at_horizon: 30.0, growth: 1.2 };
    inst.turnover.p_fd = 0.1;
    inst.turnover.p_gw = 0.2;
    inst.turnover.q_gw = 0.2;
    inst.strategic.caps = Fleet { fd: 4, gw: 4, od: 4 };
    inst.strategic.initial = Fleet { fd: 0, gw: 2, od: 1 };
    let path = dir.join("small.toml");
    fs::write(&path, inst.to_toml_string()).unwrap();
    path
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn empty_fleet_pays_the_penalty_on_all_demand() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/ops");
    ok(&[
        "ops-cost",
        "--instance",
        "builtin:grubhub18",
        "--nfd",
        "0",
        "--ngw",
        "0",
        "--nod",
        "0",
        "--t",
        "26",
        "--out",
        out.to_str().unwrap(),
    ]);
    let inst = Instance::builtin_grubhub();
    let want = inst.demand_total(26).unwrap() * inst.costs.penalty_per_request;
    let rows = read_csv(&out.join("ops_summary.csv"));
    let rate: f64 = rows.iter().find(|r| r[0] == "cost_rate").unwrap()[1].parse().unwrap();
    assert!((rate - want).abs() < 1e-9 * want);
    let level: f64 = rows.iter().find(|r| r[0] == "service_level").unwrap()[1].parse().unwrap();
    assert!(level.abs() < 1e-12);
    assert_eq!(read_csv(&out.join("ops_solution.csv")).len(), 18 * 18);
}

#[test]
fn usage_errors_fail_loudly() {
    let out = run(&["ops-cost", "--ngw", "0", "--nod", "0", "--out", "/tmp/never"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--nfd"));
    assert!(!run(&["evaluate", "--policy", "myopic", "--rollouts", "1", "--seed", "1", "--out", "/tmp/never", "--bogus"]).status.success());
    // Seeds are mandatory for stochastic commands.
    assert!(!run(&["evaluate", "--policy", "myopic", "--rollouts", "1", "--out", "/tmp/never"]).status.success());
    assert!(!run(&["train", "--episodes", "1", "--out", "/tmp/never"]).status.success());
    let help = ok(&["evaluate", "--help"]);
    for flag in ["--policy", "--rollouts", "--seed", "--jobs", "--start", "--out", "--instance"] {
        assert!(help.contains(flag), "help lacks {flag}");
    }
}

#[test]
fn validate_instance_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let good = small_instance(dir.path());
    ok(&["validate-instance", "--instance", good.to_str().unwrap()]);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(&good).unwrap().replace("gamma = 1.0", "gamma = 1.5")).unwrap();
    let out = run(&["validate-instance", "--instance", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
}

#[test]
fn evaluation_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let inst = small_instance(dir.path());
    let mut outputs = Vec::new();
    for (k, jobs) in [(0, "1"), (1, "1"), (2, "3")] {
        let out = dir.path().join(format!("eval{k}"));
        let args = [
            "evaluate",
            "--instance",
            inst.to_str().unwrap(),
            "--policy",
            "myopic",
            "--rollouts",
            "12",
            "--seed",
            "7",
            "--jobs",
            jobs,
            "--compare-fd-only",
            "--hiring-gap",
            "--out",
            out.to_str().unwrap(),
        ];
        ok(&args);
        outputs.push((fs::read(out.join("summary.csv")).unwrap(), fs::read(out.join("trajectories.csv")).unwrap()));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn bdp_train_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let inst = small_instance(dir.path());
    let inst = inst.to_str().unwrap();
    let bdp = dir.path().join("bdp");
    ok(&["bdp", "--instance", inst, "--out", bdp.to_str().unwrap()]);
    let table = bdp.join("value_table.json");
    let policy = format!("bdp:{}", table.display());
    let eval = dir.path().join("eval-bdp");
    ok(&["evaluate", "--instance", inst, "--policy", &policy, "--rollouts", "5", "--seed", "3", "--out", eval.to_str().unwrap()]);
    let rows = read_csv(&eval.join("summary.csv"));
    assert_eq!(rows[0][0], "bdp");
    assert!(!rows[0][6].is_empty(), "delta against the table value is reported");

    let train = dir.path().join("train0");
    ok(&["train", "--instance", inst, "--episodes", "0", "--seed", "1", "--out", train.to_str().unwrap()]);
    let text = fs::read_to_string(train.join("slope_table.json")).unwrap();
    assert!(text.contains("\"entries\":[]"));

    let train = dir.path().join("train");
    ok(&[
        "train",
        "--instance",
        inst,
        "--episodes",
        "40",
        "--seed",
        "1",
        "--alpha",
        "0.2",
        "--k-gw",
        "1",
        "--k-od",
        "1",
        "--out",
        train.to_str().unwrap(),
    ]);
    assert_eq!(read_csv(&train.join("training_trace.csv")).len(), 40);
    let policy = format!("plvfa:{}", train.join("slope_table.json").display());
    ok(&[
        "evaluate",
        "--instance",
        inst,
        "--policy",
        &policy,
        "--rollouts",
        "3",
        "--seed",
        "3",
        "--compare-myopic",
        "--out",
        dir.path().join("eval-pl").to_str().unwrap(),
    ]);
}

#[test]
fn sweep_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let inst = small_instance(dir.path());
    let out = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--instance",
        inst.to_str().unwrap(),
        "--param",
        "q_gw",
        "--values",
        "0.01:0.17:0.04",
        "--policy",
        "myopic",
        "--rollouts",
        "4",
        "--seed",
        "5",
        "--compare-fd-only",
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows = read_csv(&out.join("sweep.csv"));
    let mut values: Vec<String> = rows.iter().filter(|r| r[2] == "cost").map(|r| r[1].clone()).collect();
    values.dedup();
    assert_eq!(values.len(), 5);
    assert!(rows.iter().any(|r| r[2] == "h_bar"));
    let out = run(&[
        "sweep",
        "--param",
        "nonsense",
        "--values",
        "1",
        "--policy",
        "myopic",
        "--rollouts",
        "1",
        "--seed",
        "1",
        "--out",
        "/tmp/never",
    ]);
    assert!(!out.status.success());
}

#[test]
fn simulate_writes_summary_and_routes() {
    let dir = tempfile::tempdir().unwrap();
    let inst = small_instance(dir.path());
    let out = dir.path().join("sim");
    let args = [
        "simulate",
        "--instance",
        inst.to_str().unwrap(),
        "--nfd",
        "3",
        "--ngw",
        "2",
        "--nod",
        "1",
        "--seed",
        "9",
        "--replications",
        "2",
        "--hours",
        "5",
        "--out",
        out.to_str().unwrap(),
    ];
    let stdout = ok(&args);
    assert!(stdout.contains("fluid bound"));
    let summary = read_csv(&out.join("sim_summary.csv"));
    assert_eq!(summary.len(), 2);
    let routes = read_csv(&out.join("sim_routes.csv"));
    for r in &routes {
        let n: Vec<u64> = r[3..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(n[0], n[1] + n[2] + n[3] + n[4], "accounting identity");
    }
    let first = fs::read(out.join("sim_summary.csv")).unwrap();
    ok(&args);
    assert_eq!(first, fs::read(out.join("sim_summary.csv")).unwrap());
}
