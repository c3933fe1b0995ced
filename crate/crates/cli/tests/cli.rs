use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "epochs = 2\nusers_per_cell = 3\n[ckm]\ncell_size = 5.0\nmargin = 5.0\n";

fn sduscb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sduscb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = sduscb(args);
    assert!(out.status.success(), "{:?} failed: {}", args, String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_one_row_per_user_and_epoch() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", TINY);
    let out = tmp.path().join("run");
    ok(&["--threads", "1", "simulate", "--config", &cfg, "--out", path_str(&out)]);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert!(lines[0].starts_with("epoch,cell,user,scheduled,sinr"));
    assert_eq!(lines.len(), 1 + 2 * 3 * 3);
    let curve = fs::read_to_string(out.join("pfr_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 2);
    assert_eq!(summary["mode"], "sd-uscb");
    assert_eq!(summary["pfr_curve"].as_array().unwrap().len(), 2);
}

#[test]
fn floats_round_trip_through_the_trace() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", TINY);
    let out = tmp.path().join("run");
    ok(&["simulate", "--config", &cfg, "--out", path_str(&out)]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let curve = fs::read_to_string(out.join("pfr_curve.csv")).unwrap();
    for (line, want) in curve.lines().skip(1).zip(summary["pfr_curve"].as_array().unwrap()) {
        let got: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(got, want.as_f64().unwrap());
    }
}

#[test]
fn baseline_and_threshold_flags_override_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", TINY);
    let out = tmp.path().join("run");
    ok(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        path_str(&out),
        "--baseline",
        "zero-leakage",
        "--sensing-threshold",
        "0.25",
    ]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "zero-leakage");
    assert_eq!(summary["sensing_threshold"], 0.25);
}

#[test]
fn same_seed_gives_identical_files_and_seed_override_changes_them() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", TINY);
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        ok(&["simulate", "--config", &cfg, "--out", path_str(&out), "--seed", seed]);
        fs::read(out.join("trace.csv")).unwrap()
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn build_ckm_is_deterministic_and_feeds_simulate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", TINY);
    let maps_a = tmp.path().join("maps");
    let maps_b = tmp.path().join("maps_b");
    ok(&["build-ckm", "--config", &cfg, "--out", path_str(&maps_a)]);
    ok(&["build-ckm", "--config", &cfg, "--out", path_str(&maps_b)]);
    for m in 0..3 {
        let name = format!("bs{m}.sdck");
        let a = fs::read(maps_a.join(&name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, fs::read(maps_b.join(&name)).unwrap());
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(maps_a.join("build_report.json")).unwrap()).unwrap();
    assert_eq!(report["maps"].as_array().unwrap().len(), 3);
    assert!(report["maps"][0]["mean_rel_residual"].as_f64().unwrap() >= 0.0);

    let with_dir = write_config(tmp.path(), "s2.toml", &format!("{TINY}dir = \"maps\"\n"));
    let loaded = tmp.path().join("loaded");
    let built = tmp.path().join("built");
    ok(&["simulate", "--config", &with_dir, "--out", path_str(&loaded)]);
    ok(&["simulate", "--config", &cfg, "--out", path_str(&built)]);
    assert_eq!(
        fs::read(loaded.join("trace.csv")).unwrap(),
        fs::read(built.join("trace.csv")).unwrap()
    );
}

#[test]
fn missing_config_fails_with_one_line() {
    let tmp = TempDir::new().unwrap();
    let out = sduscb(&["simulate", "--config", "/nonexistent/s.toml", "--out", path_str(tmp.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
}

#[test]
fn invalid_scenario_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", "epoch_secs = 0.01\nbackhaul_delay_secs = 0.02\n");
    let out = sduscb(&["simulate", "--config", &cfg, "--out", path_str(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("backhaul delay"));
}

#[test]
fn missing_map_directory_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", &format!("{TINY}dir = \"no_maps\"\n"));
    let out = sduscb(&["simulate", "--config", &cfg, "--out", path_str(&tmp.path().join("o"))]);
    assert!(!out.status.success());
}

#[test]
fn verify_theorem1_reports_both_bounds() {
    let tmp = TempDir::new().unwrap();
    ok(&["verify-theorem1", "--out", path_str(tmp.path()), "--draws", "2000", "--s", "2,5"]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("theorem1.json")).unwrap()).unwrap();
    let reports = v.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        assert!(r["bound_slinr"].as_f64().unwrap() > 0.0);
        assert!(r["bound_salinr"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn verify_theorem1_rejects_zero_draws() {
    let tmp = TempDir::new().unwrap();
    let out = sduscb(&["verify-theorem1", "--out", path_str(tmp.path()), "--draws", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("draw"));
}

#[test]
fn bench_bf_writes_a_stable_schema() {
    let tmp = TempDir::new().unwrap();
    ok(&["bench-bf", "--out", path_str(tmp.path()), "--n-tx", "4,8", "--reps", "5"]);
    let text = fs::read_to_string(tmp.path().join("timing.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n_tx,n_users,reps,woodbury_secs,direct_secs,max_rel_diff");
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert!(fields[3] > 0.0 && fields[4] > 0.0);
        assert!(fields[5] < 1e-10);
    }
}

#[test]
fn unknown_baseline_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", TINY);
    let out = sduscb(&["simulate", "--config", &cfg, "--out", path_str(tmp.path()), "--baseline", "sdr"]);
    assert!(!out.status.success());
}
