use std::path::Path;
use std::process::Command;

use statflow::evaluate::read_reports;

const SMALL: &str = r#"
[dataset.toy]
num_classes = 3
train_per_class = 8
val_per_class = 4

[distill]
iterations = 6
level_interval = 2

[eval]
iterations = 5
golden_iterations = 5

[theory]
exchangeability_trials = 50
lognormal_trials = 2000
variance_trials = 200
degeneration_trials = 20

[theory.mc]
num_classes = 60
feature_dim = 16
"#;

fn statflow(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_statflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn setup() -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");
    (dir, cfg.display().to_string(), out.display().to_string())
}

fn ok(args: &[&str]) -> String {
    let o = statflow(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn stats_distill_eval_smoke() {
    let (_dir, cfg, out) = setup();
    ok(&["stats", "--config", &cfg, "--out", &out]);
    ok(&["distill", "--config", &cfg, "--out", &out, "--seed", "3"]);
    let table = ok(&["eval", "--config", &cfg, "--out", &out, "--seed", "3", "--strategy", "ci"]);
    assert!(table.contains("ci"));
    let reports = read_reports(&Path::new(&out).join("eval_sfm_ci.jsonl")).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].num_classes, 3);
    assert!(Path::new(&out).join("synthetic/class_000.png").exists());
    ok(&["viz", "--config", &cfg, "--out", &out, "--seed", "3"]);
    assert!(Path::new(&out).join("viz/flows.csv").exists());
    ok(&["baseline", "--config", &cfg, "--out", &out]);
    assert!(Path::new(&out).join("baseline_centroids.jsonl").exists());
}

#[test]
fn distill_without_stats_names_the_cache() {
    let (_dir, cfg, out) = setup();
    let o = statflow(&["distill", "--config", &cfg, "--out", &out]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stats.sfmstats"), "{err}");
    assert!(err.contains("stats"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[distill]\nlearning_rat = 0.1\n").unwrap();
    let o = statflow(&["stats", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));
}

#[test]
fn bad_flag_values_are_rejected() {
    let o = statflow(&["distill", "--method", "xyz"]);
    assert!(!o.status.success());
    let o = statflow(&["eval", "--alpha", "1.5", "--out", "/nonexistent/never"]);
    assert!(!o.status.success());
}

#[test]
fn theory_writes_csv_report() {
    let (_dir, cfg, out) = setup();
    let o = statflow(&["theory", "--config", &cfg, "--out", &out]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(2));
    let csv = std::fs::read_to_string(Path::new(&out).join("theory.csv")).unwrap();
    assert!(csv.starts_with("check,statistic,std_error,threshold,passed"));
    assert_eq!(csv.lines().count(), 1 + 1 + 4 + 1 + 1);
}
