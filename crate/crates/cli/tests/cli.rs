use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_protodp"));
    c.env_remove("PROTODP_OUTPUT_ROOT").env("RUST_LOG", "error");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selftest_passes() {
    let o = bin().arg("selftest").output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.lines().count() >= 5);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn run_with_overrides_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--config"])
        .arg(configs().join("baseline.toml"))
        .args(["--set", "privacy.rounds=2", "--set", "privacy.mechanism=igpp", "--seed", "3", "--out"])
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(dir.path().join("r/summary.json")).unwrap();
    assert!(summary.contains("\"mechanism\": \"igpp\""));
    assert!(summary.contains("\"seed\": 3"));
    let snapshot = std::fs::read_to_string(dir.path().join("r/config.toml")).unwrap();
    assert!(snapshot.contains("rounds = 2"));

    let o = bin().arg("report").arg(dir.path().join("r")).arg("--out").arg(dir.path().join("rep")).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("igpp"));
    assert!(dir.path().join("rep/comparison.csv").is_file());
}

#[test]
fn relative_output_goes_under_output_root() {
    let root = tempfile::tempdir().unwrap();
    let o = bin()
        .env("PROTODP_OUTPUT_ROOT", root.path())
        .args(["run", "--set", "privacy.rounds=1", "--out", "nested/run"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.path().join("nested/run/summary.json").is_file());
}

#[test]
fn config_errors_exit_with_one() {
    let root = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["run", "--set", "privacy.no_such_key=1"],
        &["run", "--set", "privacy.rho=0.7"],
        &["run", "--set", "train.beta=1.5"],
        &["run", "--config", "/nonexistent/config.toml"],
    ];
    for args in cases {
        let o = bin().env("PROTODP_OUTPUT_ROOT", root.path()).args(args).output().unwrap();
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    }
}

#[test]
fn unknown_key_in_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[privacy]\nepsilon = 1.0\nsigma = 3.0\n").unwrap();
    let o = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));
}

#[test]
fn report_rejects_schema_mismatch_and_missing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    let o = bin().args(["run", "--set", "privacy.rounds=1", "--out"]).arg(&run).output().unwrap();
    assert!(o.status.success());
    let p = run.join("summary.json");
    let s = std::fs::read_to_string(&p).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
    std::fs::write(&p, s).unwrap();
    let o = bin().arg("report").arg(&run).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let o = bin().arg("report").arg(dir.path().join("missing")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    for name in ["baseline.toml", "sweep.toml"] {
        let text = std::fs::read_to_string(configs().join(name)).unwrap();
        protodp::config::RunConfig::from_toml_str(&text).unwrap().validate().unwrap();
    }
}
