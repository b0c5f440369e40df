use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn shellmodel(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shellmodel"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii()).unwrap()
}

#[test]
fn identities_all_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = shellmodel(&["identities"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("identities.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# shellmodel "));
    assert_eq!(lines.next().unwrap(), "m,samples,antisymmetry,energy,enstrophy,pass");
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}

#[test]
fn rate_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = shellmodel(
        &["rate", "--study.params.target.threshold=0.8", "--solver.horizon=2"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("rate.csv")).unwrap();
    let row = csv.lines().nth(2).unwrap();
    let rate: f64 = row.split(',').next().unwrap().parse().unwrap();
    // x^2 / (2 q_1 T) with q_1 = 1
    let exact = 0.8 * 0.8 / 4.0;
    assert!((rate - exact).abs() < 1e-6 * exact, "{rate} vs {exact}");
}

#[test]
fn outputs_carry_provenance() {
    let dir = tempfile::tempdir().unwrap();
    assert!(shellmodel(&["rate"], dir.path()).status.success());
    let json: Value = serde_json::from_slice(&std::fs::read(dir.path().join("rate.json")).unwrap()).unwrap();
    assert_eq!(json["tool"], "shellmodel");
    assert_eq!(json["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(json["study"], "rate");
    let hash = json["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let csv = std::fs::read_to_string(dir.path().join("rate.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with(&format!("config_sha256={hash}")));
    assert!(std::fs::read_dir(dir.path()).unwrap().all(|e| {
        let name = e.unwrap().file_name();
        let name = name.to_string_lossy();
        name.starts_with("rate.")
    }));
}

#[test]
fn invalid_mu_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = shellmodel(&["rate", "--model.mu=0.9"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert_eq!(err["pointer"], "model.mu");
    assert!(!dir.path().join("rate.csv").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = shellmodel(&["simulate", "--set", "solver.stpes=10"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["pointer"], "solver.stpes");
}

#[test]
fn blow_up_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = shellmodel(
        &[
            "skeleton",
            "--solver.cfl=null",
            "--initial.scale=1000",
            "--solver.steps=16",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "blow_up");
}

#[test]
fn printed_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = shellmodel(
        &["levelset", "--print-config", "--study.params.n_controls=3"],
        dir.path(),
    );
    assert!(out.status.success());
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["study"]["params"]["n_controls"], 3);
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, &out.stdout).unwrap();
    let run = shellmodel(&["levelset", "--config", path.to_str().unwrap()], dir.path());
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("levelset:"));

    let wrong = shellmodel(&["rate", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(wrong.status.code(), Some(2));
    assert_eq!(stderr_json(&wrong)["pointer"], "study.name");
}

#[test]
fn mc_ldp_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = shellmodel(
        &["mc-ldp", "--study.params.nu_grid=[0.1]", "--study.params.n_paths=200"],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("mc-ldp.csv")).unwrap();
    assert_eq!(
        csv.lines().nth(1).unwrap(),
        "nu,p_hat,stderr,n_paths,nu_log_p,rate_upper_bound"
    );
    assert_eq!(csv.lines().count(), 3);
}
