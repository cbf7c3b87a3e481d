//! The `tsc` binary: config documents, flag overrides and the endpoint
//! environment variable.

use std::process::Command;
use std::time::Duration;

use tsc_core::checkpoint::Checkpoint;
use tsc_core::harness::{read_json, ControllerKind, RunConfig};
use tsc_core::nn::PolicyParams;
use tsc_core::ppo::PpoConfig;
use tsc_core::refine::{FakeMode, FakeServer, ENDPOINT_ENV};

fn tsc() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tsc"));
    c.env_remove(ENDPOINT_ENV);
    c
}

fn run(c: &mut Command) -> String {
    let out = c.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const DOC: &str = r#"
[scenario.sim]
duration = 240

[eval]
name = "smoke"
controllers = ["fixtime", "maxpressure"]
seeds = [4, 5, 6]
"#;

#[test]
fn flags_override_the_config_document() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, DOC).unwrap();
    let printed = RunConfig::from_toml_str(&run(tsc().arg("--config").arg(&cfg).arg("print-config"))).unwrap();
    assert_eq!(printed.eval.seeds, vec![4, 5, 6]);
    assert_eq!(printed.scenario.sim.duration, 240);

    let out = dir.path().join("out");
    let table = run(tsc().arg("-c").arg(&cfg).args(["eval", "--seeds", "1-2", "--out-dir"]).arg(&out));
    assert!(table.contains("maxpressure"));
    let m = read_json(out.join("smoke.json")).unwrap();
    assert_eq!(m.seeds, vec![1, 2]);
    assert_eq!(m.records.len(), 4);
    assert!(out.join("smoke.csv").exists());
}

#[test]
fn bad_input_fails_cleanly() {
    let out = tsc().args(["eval", "--seeds", "9-2"]).output().unwrap();
    assert!(!out.status.success());
    let out = tsc().args(["--config", "/nonexistent.toml", "print-config"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("reading config"));
}

#[test]
fn remote_endpoint_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("p.tsck");
    let config = PpoConfig::default();
    Checkpoint { params: PolicyParams::init(config.net, 1), config }.save(&ck).unwrap();
    let server = FakeServer::start("127.0.0.1:0", FakeMode::Rule, Duration::ZERO).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, DOC).unwrap();
    let out = dir.path().join("out");

    let missing = tsc()
        .arg("-c")
        .arg(&cfg)
        .args(["eval", "--controllers", "reasonlight", "--backend", "remote", "--checkpoint"])
        .arg(&ck)
        .output()
        .unwrap();
    assert!(!missing.status.success());

    run(tsc()
        .env(ENDPOINT_ENV, server.url())
        .arg("-c")
        .arg(&cfg)
        .args(["eval", "--controllers", "reasonlight", "--backend", "remote", "--emv-count", "2", "--seeds", "3"])
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--out-dir")
        .arg(&out));
    let m = read_json(out.join("smoke.json")).unwrap();
    assert_eq!(m.records[0].controller, ControllerKind::Reasonlight);
    assert_eq!(m.records[0].metrics.preserved + m.records[0].metrics.refined, 240);
}
