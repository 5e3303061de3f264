use std::path::PathBuf;

use linbpi::bpi::{gss_run, Identifier, StoppingConfig};
use linbpi::bundled::resolve_bundled;
use linbpi::harness::{
    cell_config, load_plan, report, run_plan, summarize, trial_rng, trial_seed, write_summary_csv,
    write_trials_csv, ExperimentPlan, InstanceSource, PlanEntry, TmaxPolicy,
};
use linbpi::mdp::save_instance;

fn small_entry(name: &str) -> PlanEntry {
    let mut e = PlanEntry::new(InstanceSource::Bundled(name.into()), vec![0.1], vec![0.1], 2);
    e.stride = 100;
    e
}

#[test]
fn single_trial_reproduces_direct_run() {
    let plan = ExperimentPlan::new(42, vec![small_entry("twin")]);
    let result = run_plan(&plan, 2).unwrap();
    let row = &result.trials[0];
    assert_eq!(row.seed, trial_seed(42, "e0.s0.d0.x0", 0));

    let m = resolve_bundled("twin").unwrap();
    let id = Identifier::new(&m, plan.entries[0].eps_g).unwrap();
    let config = cell_config(&plan.entries[0], &id, 0.1, 0.1).unwrap();
    let direct = gss_run(m.as_discounted().unwrap(), &config, plan.entries[0].eps_g, &mut trial_rng(row.seed)).unwrap();
    assert_eq!(row.tau, Some(direct.tau));
    assert_eq!(row.correct, Some(direct.correct));
    assert_eq!(row.capped, Some(direct.capped));
}

#[test]
fn grid_yields_one_summary_per_cell() {
    let mut e = small_entry("switch");
    e.deltas = vec![0.2, 0.1, 0.05];
    e.epsilons = vec![0.0, 0.1, 0.3];
    e.t_max = TmaxPolicy::Fixed(2_000);
    let result = run_plan(&ExperimentPlan::new(1, vec![e]), 1).unwrap();
    assert_eq!(result.summaries.len(), 9);
    assert!(result.summaries.iter().all(|s| s.trials == 2));
    assert_eq!(result.trials.len(), 18);
    // a short cap leaves every run incomplete, never failed
    assert!(result.summaries.iter().all(|s| s.capped == 2 && s.failures == 0));
}

#[test]
fn aggregates_match_raw_trials() {
    let mut e = small_entry("twin");
    e.trials = 7;
    e.deltas = vec![0.1, 0.2];
    let result = run_plan(&ExperimentPlan::new(5, vec![e]), 1).unwrap();
    for s in &result.summaries {
        let rows: Vec<_> = result.trials.iter().filter(|r| r.cell == s.cell).cloned().collect();
        let again = summarize(&s.cell, &s.label, s.scale, s.u_star, s.predicted_stop_time, &rows, s.delta, s.epsilon);
        assert_eq!(again.failures, s.failures);
        let mut taus: Vec<f64> = rows.iter().filter(|r| r.capped == Some(false)).map(|r| r.tau.unwrap() as f64).collect();
        taus.sort_by(f64::total_cmp);
        let mean = taus.iter().sum::<f64>() / taus.len() as f64;
        assert!((mean - s.mean_tau).abs() <= 1e-12 * mean);
        assert!((again.median_tau - s.median_tau).abs() <= 1e-12);
        let rank = (0.95 * taus.len() as f64).ceil() as usize;
        assert_eq!(taus[rank - 1], s.p95_tau);
        let fails = rows.iter().filter(|r| r.capped == Some(false) && r.correct == Some(false)).count();
        assert!((s.failure_rate - fails as f64 / rows.len() as f64).abs() <= 1e-12);
    }
}

#[test]
fn trial_errors_do_not_abort_the_batch() {
    let missing = PlanEntry::new(InstanceSource::File("/nonexistent/instance.json".into()), vec![0.1], vec![0.1], 2);
    let plan = ExperimentPlan::new(3, vec![missing, small_entry("twin")]);
    let result = run_plan(&plan, 1).unwrap();
    assert_eq!(result.trials.len(), 4);
    assert!(result.trials[..2].iter().all(|r| r.error.is_some()));
    assert!(result.trials[2..].iter().all(|r| r.error.is_none() && r.tau.is_some()));
    assert_eq!(result.summaries[0].errors, 2);
}

#[test]
fn sweep_reports_slope_and_svg() {
    let mut e = small_entry("twin");
    e.scales = Some(vec![1.0, 0.5]);
    let mut plan = ExperimentPlan::new(8, vec![e]);
    plan.svg = true;
    let result = run_plan(&plan, 1).unwrap();
    assert_eq!(result.slopes.len(), 1);
    assert!(result.slopes[0].slope.is_finite());
    let dir = tempfile::tempdir().unwrap();
    let paths = report(&result, dir.path(), true).unwrap();
    assert_eq!(paths.len(), 4);
    let text = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(text.contains("log-log slope"));
    let svg = std::fs::read_to_string(dir.path().join("slopes.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<circle"));
}

#[test]
fn plan_file_resolves_relative_instances() {
    let dir = tempfile::tempdir().unwrap();
    save_instance(&resolve_bundled("switch").unwrap(), dir.path().join("inst.json")).unwrap();
    let plan_path = dir.path().join("plan.json");
    std::fs::write(
        &plan_path,
        r#"{"master_seed": 4, "entries": [{"instance": {"file": "inst.json"}, "deltas": [0.1],
            "epsilons": [0.1], "trials": 1, "stride": 100, "acceptance": true}]}"#,
    )
    .unwrap();
    let plan = load_plan(&plan_path).unwrap();
    let result = run_plan(&plan, 1).unwrap();
    assert!(result.trials[0].error.is_none(), "{:?}", result.trials[0].error);
    assert_eq!(result.checks.len(), 1);
    assert!(result.all_checks_passed());
}

#[test]
fn stride_only_delays_stopping() {
    let m = resolve_bundled("twin").unwrap();
    let id = Identifier::new(&m, 0.01).unwrap();
    let mut fine = StoppingConfig::new(0.1, 0.1);
    fine.check_stride = 10;
    let mut coarse = fine.clone();
    coarse.check_stride = 1000;
    let a = id.run(&fine, &mut trial_rng(3)).unwrap();
    let b = id.run(&coarse, &mut trial_rng(3)).unwrap();
    assert!(b.tau >= a.tau && b.tau < a.tau + 1000);
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Regenerate with `LINBPI_BLESS=1 cargo test --test harness_runs golden`.
#[test]
fn golden_csv_for_fixed_seed() {
    let mut twin = small_entry("twin");
    twin.deltas = vec![0.1, 0.01];
    let mut ring = small_entry("ring:episodic");
    ring.t_max = TmaxPolicy::Fixed(30_000);
    let plan = ExperimentPlan::new(2024, vec![twin, ring]);
    let result = run_plan(&plan, 3).unwrap();
    let mut trials = Vec::new();
    write_trials_csv(&result.trials, &mut trials).unwrap();
    let mut summary = Vec::new();
    write_summary_csv(&result.summaries, &mut summary).unwrap();
    let dir = golden_dir();
    if std::env::var_os("LINBPI_BLESS").is_some() {
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("trials.csv"), &trials).unwrap();
        std::fs::write(dir.join("summary.csv"), &summary).unwrap();
    }
    assert_eq!(String::from_utf8(trials).unwrap(), std::fs::read_to_string(dir.join("trials.csv")).unwrap());
    assert_eq!(String::from_utf8(summary).unwrap(), std::fs::read_to_string(dir.join("summary.csv")).unwrap());
}
