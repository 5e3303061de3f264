use std::path::Path;
use std::process::{Command, Output};

fn linbpi(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_linbpi"));
    cmd.args(args);
    if let Some(w) = workers {
        cmd.env("LINBPI_WORKERS", w);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_documented_columns() {
    let o = linbpi(&["run", "--bundled", "twin", "--trials", "2", "--stride", "100", "--seed", "3"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,mode,d,S,A,gamma_or_H,delta,epsilon,gap,sigma_star,tau,correct,capped,wallclock_ms"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn design_and_solve_report() {
    let o = linbpi(&["design", "--bundled", "switch"], None);
    assert!(o.status.success());
    assert!(stdout(&o).contains("certified (sigma <= (1 + eps_g) d): true"));
    let o = linbpi(&["solve", "--bundled", "switch"], None);
    assert!(o.status.success());
    assert!(stdout(&o).contains("gap = 1"));
}

#[test]
fn invalid_instance_names_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"d": 2, "S": 2, "A": 1, "mode": "discounted", "gamma": 0.5,
            "phi": [[[1, 0]], [[0, 1]]], "theta": [1.5, 0.0], "mu": [[0.5, 0.0], [0.5, 1.0]]}"#,
    )
    .unwrap();
    let o = linbpi(&["solve", "--instance", path.to_str().unwrap()], None);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("reward parameter bound") || err.contains("mean reward"), "{err}");
}

fn bench(plan: &Path, out: &Path, workers: &str) -> Output {
    linbpi(&["bench", plan.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(workers))
}

#[test]
fn bench_is_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    std::fs::write(
        &plan,
        r#"{"master_seed": 11, "entries": [
            {"instance": {"bundled": "twin"}, "deltas": [0.1, 0.2], "epsilons": [0.1], "trials": 3, "stride": 100},
            {"instance": {"bundled": "switch:episodic"}, "deltas": [0.1], "epsilons": [0.1], "trials": 3,
             "stride": 100, "scales": [1.0, 0.5], "acceptance": true}]}"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("w1"), dir.path().join("w4"));
    let oa = bench(&plan, &a, "1");
    let ob = bench(&plan, &b, "4");
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    assert!(ob.status.success());
    for file in ["trials.csv", "summary.csv", "summary.txt"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert!(stdout(&oa).contains("PASS pac"));
}

#[test]
fn failing_acceptance_check_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    // a one-round cap makes the sweep slope undefined, so the check fails
    std::fs::write(
        &plan,
        r#"{"master_seed": 1, "entries": [{"instance": {"bundled": "twin"}, "deltas": [0.1], "epsilons": [0.1],
            "trials": 1, "t_max": {"fixed": 1}, "scales": [1.0, 0.5], "acceptance": true}]}"#,
    )
    .unwrap();
    let o = bench(&plan, &dir.path().join("out"), "1");
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL slope"));
}

#[test]
fn oracles_report_no_violations() {
    let o = linbpi(&["oracles", "--seed", "5"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("gap_bound_check (discounted)"));
    assert!(text.contains("kl_pinsker_variant_check"));
}
