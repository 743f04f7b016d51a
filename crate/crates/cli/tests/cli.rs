use std::path::Path;
use std::process::{Command, Output};

use choicemiss::sim::cohort_dataset;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_choicemiss"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn choicemiss")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_cohort(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("cohort.csv");
    cohort_dataset(3000, 11).unwrap().write_csv(&path).unwrap();
    path
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn patterns_table_lists_eight_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_cohort(dir.path());
    let out_json = dir.path().join("patterns.json");
    let o = run(&["patterns", csv.to_str().unwrap(), "--out", out_json.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].contains("preterm") && lines[0].contains("count"));
    assert_eq!(lines.len() - 1, 8, "{text}");

    let report: Value = serde_json::from_str(&std::fs::read_to_string(out_json).unwrap()).unwrap();
    let rows = report["results"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    let total: u64 = rows.iter().map(|r| r["count"].as_u64().unwrap()).sum();
    assert_eq!(total, 3000);
    assert_eq!(report["config_sha256"].as_str().unwrap().len(), 64);
    assert!(report["version"].is_string());
}

#[test]
fn dr_without_law_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    write_cohort(dir.path());
    let cfg = write_config(
        dir.path(),
        r#"{"input": "cohort.csv", "estimand": "logistic:preterm~low_cd4+cont_haart", "methods": ["dr"]}"#,
    );
    let o = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("complete-case law required for dr"), "{}", stderr(&o));
}

#[test]
fn empty_methods_and_bad_estimand_are_both_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_cohort(dir.path());
    let cfg = write_config(dir.path(), r#"{"input": "cohort.csv", "estimand": "mean:nope", "methods": []}"#);
    let o = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("methods:"), "{err}");
    assert!(err.contains("estimand:"), "{err}");
}

#[test]
fn unknown_pattern_in_odds_override_names_the_pattern() {
    let dir = tempfile::tempdir().unwrap();
    write_cohort(dir.path());
    let cfg = write_config(
        dir.path(),
        r#"{"input": "cohort.csv", "estimand": "mean:preterm", "methods": ["ipw"],
            "odds": {"patterns": [{"pattern": 99, "terms": ["low_cd4"]}]}}"#,
    );
    let o = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("odds.patterns") && err.contains("99"), "{err}");
}

#[test]
fn logistic_estimate_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_cohort(dir.path());
    let cfg = write_config(
        dir.path(),
        r#"{"input": "cohort.csv",
            "estimand": "logistic:preterm~low_cd4+cont_haart",
            "odds": {"default": "main_and_pairwise"},
            "law": {"law": "discrete_loglinear", "terms": ["preterm", "low_cd4", "cont_haart",
                     "preterm:low_cd4", "preterm:cont_haart", "low_cd4:cont_haart"]},
            "methods": ["ipw", "pm", "dr", "mle"]}"#,
    );
    let out_json = dir.path().join("est.json");
    let o = run(&["estimate", "--config", cfg.to_str().unwrap(), "--out", out_json.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out_json).unwrap()).unwrap();
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 4);
    for r in results {
        let beta = r["beta_hat"].as_array().unwrap();
        assert_eq!(beta.len(), 3);
        for (b, s) in beta.iter().zip(r["se"].as_array().unwrap()) {
            assert!(b.as_f64().unwrap().is_finite());
            assert!(s.as_f64().unwrap() > 0.0);
        }
    }
    assert!(!report.to_string().contains("elapsed"));
}

#[test]
fn sensitivity_sweep_reports_each_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    write_cohort(dir.path());
    let cfg = write_config(
        dir.path(),
        r#"{"input": "cohort.csv", "estimand": "mean:preterm",
            "law": {"law": "discrete_loglinear", "terms": []}, "methods": ["ipw", "dr"]}"#,
    );
    let out_json = dir.path().join("sens.json");
    let o = run(&[
        "sensitivity",
        "--config",
        cfg.to_str().unwrap(),
        "--tilt",
        "mask=011: phi*preterm",
        "--grid",
        "-1:1:0.5",
        "--methods",
        "ipw,dr",
        "--out",
        out_json.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out_json).unwrap()).unwrap();
    let points = report["results"]["points"].as_array().unwrap();
    assert_eq!(points.len(), 5);
}

#[test]
fn simulate_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let args = |threads: &str, out: &Path| {
        run(&[
            "--threads",
            threads,
            "simulate",
            "--scenario",
            "bth,ccm",
            "--reps",
            "6",
            "--n",
            "400",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let oa = args("1", &a);
    let ob = args("3", &b);
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert!(ob.status.success(), "{}", stderr(&ob));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(stdout(&oa), stdout(&ob));
}

#[test]
fn bad_arguments_exit_with_one() {
    let o = run(&["simulate", "--scenario", "zzz", "--reps", "2", "--n", "100"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}
