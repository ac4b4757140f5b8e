use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
    "name": "cli",
    "stream": {"n_tasks": 2, "train_size": 16, "test_size": 8, "think_len_max": 0, "incompetent_tasks": [1]},
    "policy": {"kind": "mlp", "hidden": 6},
    "pretrain": {"steps": 10},
    "methods": [
        {"name": "sft", "estimator": {"estimator": "sft"},
         "optimizer": {"learning_rate": 0.1, "batch_size": 4, "steps_per_task": 3}},
        {"name": "rif", "estimator": {"estimator": "grpo", "kl_mode": "monte_carlo", "group_size": 4},
         "optimizer": {"learning_rate": 0.01, "batch_size": 4, "steps_per_task": 3},
         "filter": {"n_rollouts": 4}}
    ],
    "seeds": [0]
}"#;

fn rftlab(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rftlab"));
    cmd.args(args).env_remove("RFTLAB_OUT").env_remove("RFTLAB_PARALLEL");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn validate_accepts_good_and_names_bad_fields() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), CONFIG);
    let o = rftlab(&["validate", &good], &[]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("ok (2 runs)"));

    let bad = write_config(dir.path(), &CONFIG.replace("\"hidden\": 6", "\"hidden\": -6"));
    let o = rftlab(&["validate", &bad], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("policy"), "{o:?}");

    let exact = write_config(dir.path(), &CONFIG.replace("\"kl_mode\": \"monte_carlo\", ", "").replace("\"think_len_max\": 0", "\"think_len_max\": 1"));
    let o = rftlab(&["validate", &exact], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("methods[1].estimator.kl_mode"), "{o:?}");
}

#[test]
fn run_table_and_reports_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = rftlab(&["run", &cfg, "--seeds", "0,1"], &[("RFTLAB_OUT", &out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.matches(": done").count(), 4, "{text}");
    assert!(out.join("rif/seed_1/filter_report.json").is_file());

    // Resuming does no new work.
    let o = rftlab(&["run", &cfg, "--seeds", "0,1", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).matches(": reused").count(), 4);

    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(table.as_bytes());
    assert_eq!(rows.records().count(), 2);

    let o = rftlab(&["table", out.to_str().unwrap()], &[]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("method"));

    let run = out.join("rif/seed_0");
    let o = rftlab(&["filter-report", run.to_str().unwrap()], &[]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("overall: trained on"));

    let o = rftlab(&["risk", run.to_str().unwrap(), "--probe-size", "2", "--mc-samples", "64"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("risk_trace.csv").is_file());
    assert!(run.join("risk_summary.json").is_file());

    // Tampered metrics are caught.
    let metrics = out.join("sft/seed_0/metrics.json");
    std::fs::write(&metrics, r#"{"avg_acc": 0.123, "fm": 0.0}"#).unwrap();
    let o = rftlab(&["table", out.to_str().unwrap()], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("disagrees"));
}

#[test]
fn filter_report_without_filter_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = rftlab(&["filter-report", dir.path().to_str().unwrap()], &[]);
    assert!(!o.status.success());
}
