use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gem")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn route_logs_one_decision_per_token() {
    let out = gem(&["route", "--tokens", "1,2,3,4,5"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    for (i, line) in lines.iter().enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["token_index"], i);
        let p = v["max_prob"].as_f64().unwrap();
        assert!(p > 0.0 && p <= 1.0);
    }
}

#[test]
fn route_writes_histogram_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = gem(&["--out", out_dir.to_str().unwrap(), "route", "--tokens", "1,2,3"]);
    assert!(out.status.success());
    for f in ["routing.jsonl", "route_histogram.json", "route_histogram.dat"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn exit_codes() {
    assert_eq!(gem(&["reproduce"]).status.code(), Some(0));
    assert_eq!(gem(&["bogus"]).status.code(), Some(1));
    assert_eq!(gem(&["--help"]).status.code(), Some(0));
    assert_eq!(gem(&["route", "--tokens", "999999"]).status.code(), Some(1));
    assert_eq!(gem(&["route", "--tau", "1.5"]).status.code(), Some(1));
    assert_eq!(gem(&["cost", "--platform", "abacus"]).status.code(), Some(1));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [("[scar]\nk = 0\n", "scar.k"), ("[scar]\nwidth = 3\n", "width"), ("[route.router]\ntau = 0.0\n", "tau")];
    for (body, field) in cases {
        let cfg = write_config(dir.path(), body);
        let out = gem(&["--config", &cfg, "scar"]);
        assert_eq!(out.status.code(), Some(1), "{body}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(field), "{body}: {err}");
    }
}

#[test]
fn training_for_zero_epochs_changes_nothing() {
    let out = gem(&["train", "--epochs", "0"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["accuracy_before"], v["accuracy_after"]);
    assert_eq!(v["history"].as_array().unwrap().len(), 0);
}

#[test]
fn one_cluster_per_point_gives_density_one_over_n() {
    let out = gem(&["scar", "--n", "20", "--k", "20"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["mask_density"].as_f64().unwrap() - 1.0 / 20.0).abs() < 1e-15);
    // k·n clustered terms plus n
    assert_eq!(v["scar_ops"], 20 * 20 + 20);
}

#[test]
fn seed_flag_changes_synthetic_scar_input() {
    let a = gem(&["--seed", "1", "scar", "--n", "24", "--k", "3"]);
    let b = gem(&["--seed", "2", "scar", "--n", "24", "--k", "3"]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn scar_reads_embeddings_from_json() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("emb.json");
    std::fs::write(&emb, "[[1,0],[0.9,0.1],[0,1],[0.1,0.9]]").unwrap();
    let cfg = write_config(dir.path(), &format!("[scar]\nk = 2\nembeddings = {:?}\n", emb.to_str().unwrap()));
    let out = gem(&["--config", &cfg, "scar"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["n"], 4);
    assert!((v["mask_density"].as_f64().unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn metrics_formats() {
    let json: Value = serde_json::from_slice(&gem(&["metrics"]).stdout).unwrap();
    assert!(json.as_array().is_some_and(|a| !a.is_empty()));
    let csv = String::from_utf8(gem(&["--format", "csv", "metrics"]).stdout).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    let cols = header.split(',').count();
    assert!(lines.all(|l| l.split(',').count() == cols));
}

#[test]
fn reproduce_json_has_no_mismatches() {
    let out = gem(&["--format", "json", "reproduce"]);
    assert!(out.status.success());
    let rows: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert!(rows.iter().all(|r| r["status"] != "mismatch"));
}

#[test]
fn cost_reports_energy_per_token() {
    let out = gem(&["cost"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["platform"]["name"], "raspberry-pi-4");
    assert!((v["report"]["energy_j_per_token"].as_f64().unwrap() - 0.125).abs() < 1e-12);
}
