use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use signflow_cli::format::{recompute_row, DatasetFile, Table};
use signflow_core::dynamics::Algorithm;
use signflow_core::problem::HyperParams;

fn signflow(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signflow")).args(args).arg("--out").arg(out).output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn table(path: &Path) -> Table {
    Table::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn check_round_trip(dir: &Path, csv: &str, algorithm: Algorithm, eps: f64, alpha: f64) {
    let doc = json(&dir.join("dataset.json"));
    let ds: DatasetFile = serde_json::from_value(doc).unwrap();
    let ds = ds.build().unwrap();
    let hp = HyperParams::new(eps, alpha).unwrap();
    let t = table(&dir.join(csv));
    assert!(t.rows.len() > 10);
    for row in 0..t.rows.len() {
        let s = recompute_row(&ds, algorithm, &hp, &t, row);
        for (prefix, values) in [("beta", &s.beta), ("dual", &s.dual), ("r", &s.residuals), ("f", &s.f), ("h", &s.h)] {
            let stored = t.group(row, prefix);
            assert_eq!(stored.len(), values.len(), "{prefix}");
            for (a, b) in stored.iter().zip(values.iter()) {
                assert!((a - b).abs() <= 1e-12, "{csv} row {row} {prefix}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn simulate_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = signflow(&["simulate", "--seed", "7", "--alpha", "0.1", "--eps", "0.005"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trajectory.csv", "stages.json", "kkt.json", "verification.json", "dataset.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let stages = json(&dir.path().join("stages.json"));
    assert_eq!(stages["schema_version"], 1);
    let t0 = stages["T0"].as_f64().unwrap();
    assert!(t0 > 0.0 && t0 <= 0.2, "T0 = {t0}");
    assert!(stages["T"].as_f64().unwrap() > t0);
    assert_eq!(stages["t_i"].as_array().unwrap().len(), 5);
    assert_eq!(stages["T_i"].as_array().unwrap().len(), 5);

    let header = table(&dir.path().join("trajectory.csv")).header;
    assert_eq!(header[0], "t");
    assert_eq!(header.len(), 1 + 4 * 5 + 2 + 2 * 5);
    assert_eq!(header[1 + 4 * 5], "r_1");
    check_round_trip(dir.path(), "trajectory.csv", Algorithm::Ssd, 0.005, 0.1);
}

#[test]
fn simulate_gd_records_conservation() {
    let dir = tempfile::tempdir().unwrap();
    let out = signflow(&["simulate", "--seed", "7", "--algo", "gd"], dir.path());
    assert!(out.status.success());
    let kkt = json(&dir.path().join("kkt.json"));
    assert!(kkt["gd_conservation"].as_f64().unwrap() <= 1e-8);
    assert!(kkt["report"]["delta_bar"].as_f64().unwrap() <= 1e-6);
    let ver = json(&dir.path().join("verification.json"));
    let claims = ver["claims"].as_array().unwrap();
    let cons = claims.iter().find(|c| c["name"] == "gd_conservation").unwrap();
    assert_eq!(cons["status"], "pass");
    check_round_trip(dir.path(), "trajectory.csv", Algorithm::Gd, 0.005, 0.1);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"dataset": {"blocks": [{"xs": [0.8, 0.6], "y": 1.0}]}, "eps": 0.5, "alpha": 0.1,
            "integrator": {"sample_grid": 50}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("o");
    let out = signflow(&["simulate", "--config", cfg.to_str().unwrap(), "--eps", "0.01"], &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stages = json(&out_dir.join("stages.json"));
    assert_eq!(stages["eps"].as_f64(), Some(0.01));
    let ds = json(&out_dir.join("dataset.json"));
    assert_eq!(ds["blocks"][0]["xs"][1].as_f64(), Some(0.6));
    assert_eq!(ds["schema_version"], 1);
}

#[test]
fn sweep_writes_per_eps_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = signflow(&["sweep", "--seed", "3", "--eps-grid", "0.001,0.002,0.005,0.01"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for k in 0..4 {
        assert!(dir.path().join(format!("trajectory_eps{k}.csv")).exists());
        assert!(dir.path().join(format!("stages_eps{k}.json")).exists());
    }
    let sweep = table(&dir.path().join("sweep.csv"));
    assert_eq!(sweep.header, ["eps", "T0", "T", "E", "delta_bar", "sum_bound", "line_bound"]);
    assert_eq!(sweep.rows.len(), 4);
    let doc = json(&dir.path().join("sweep.json"));
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["cells"].as_array().unwrap().len(), 4);
}

#[test]
fn two_dim_sweep_has_decreasing_e_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let out = signflow(&["figure", "fig3", "--seed", "4"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fig3 = table(&dir.path().join("fig3.csv"));
    assert_eq!(fig3.header, ["eps", "E"]);
    assert_eq!(fig3.rows.len(), 5);
    assert!(fig3.rows.windows(2).all(|w| w[1][1] < w[0][1]), "{:?}", fig3.rows);
    let sweep = table(&dir.path().join("sweep.csv"));
    let line = sweep.column("line_bound").unwrap();
    assert!(sweep.rows.iter().all(|r| r[line].is_finite()));

    let fig_dir = dir.path().join("from");
    let out = Command::new(env!("CARGO_BIN_EXE_signflow"))
        .args(["figure", "fig2", "--from"])
        .arg(dir.path())
        .arg("--out")
        .arg(&fig_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let fig2 = table(&fig_dir.join("fig2.csv"));
    assert_eq!(fig2.header, ["eps", "t", "beta_1", "beta_2"]);
    assert_eq!(&fig2.rows[0][1..], [0.0, 0.0, 0.0]);

    let out = Command::new(env!("CARGO_BIN_EXE_signflow"))
        .args(["figure", "fig1", "--from"])
        .arg(dir.path())
        .arg("--out")
        .arg(&fig_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let markers = table(&fig_dir.join("fig1_markers.csv"));
    assert_eq!(markers.header, ["eps", "T0", "T"]);
    assert!(markers.rows.iter().all(|r| r[1] < r[2]));
    let f1 = table(&fig_dir.join("fig1_eps0.csv"));
    assert_eq!(f1.header, ["t", "beta_1", "beta_2", "dual_1", "dual_2"]);
}

#[test]
fn verify_batch_passes_and_reports_margins() {
    let dir = tempfile::tempdir().unwrap();
    let out = signflow(&["verify", "--seed", "5", "--instances", "20"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = json(&dir.path().join("verify.json"));
    assert_eq!(doc["passed"], true);
    assert_eq!(doc["instance_results"].as_array().unwrap().len(), 20);
    let claims = doc["claims"].as_array().unwrap();
    assert!(claims.iter().any(|c| c["name"] == "delta_bounds" && c["worst_margin"].as_f64().unwrap() >= 0.0));
}

#[test]
fn inadmissible_eps_is_gated_not_failed() {
    let dir = tempfile::tempdir().unwrap();
    let out = signflow(&["verify", "--seed", "5", "--instances", "4", "--eps", "0.5"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    assert_eq!(signflow(&["simulate"], &file.join("sub")).status.code(), Some(1));
    assert_eq!(signflow(&["verify", "--instances", "0"], dir.path()).status.code(), Some(1));
    assert_eq!(signflow(&["sweep", "--eps-grid", ""], dir.path()).status.code(), Some(1));
    assert_eq!(signflow(&["sweep", "--eps-grid", "0.01,0.005"], dir.path()).status.code(), Some(1));
    assert_eq!(signflow(&["simulate", "--bogus"], dir.path()).status.code(), Some(1));
    let missing = Command::new(env!("CARGO_BIN_EXE_signflow"))
        .args(["figure", "fig3", "--from"])
        .arg(dir.path().join("nowhere"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    // stops at t_max long before convergence
    let out = signflow(&["simulate", "--t-max", "1e-3"], &dir.path().join("short"));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("short").join("kkt.json").exists());
}
