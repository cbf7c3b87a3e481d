//! Episode runner, metrics, safety checker and evaluation exports.

use proptest::prelude::*;
use tsc_core::harness::{
    check_episode, digest, evaluate, metrics_from_log, read_json, run_episode, summary_table, write_csv, write_json,
    ControllerKind, EmergencySpec, EpisodeOutput, EvalSpec, Stat, Violation, Workload,
};
use tsc_core::nn::PolicyParams;
use tsc_core::ppo::PpoConfig;
use tsc_core::refine::{BackendConfig, BackendKind};
use tsc_core::sim::{LogKind, MovementId, ScenarioConfig, ScenarioEvent};

fn params() -> PolicyParams {
    PolicyParams::init(PpoConfig::default().net, 21)
}

fn short(duration: u64) -> ScenarioConfig {
    let mut s = ScenarioConfig::default();
    s.sim.duration = duration;
    s
}

fn emv_workload(duration: u64, count: usize) -> Workload {
    Workload {
        name: "emv".into(),
        scenario: short(duration),
        emergencies: Some(EmergencySpec { count, from: 10, to: duration - 60, exclude: vec![] }),
    }
}

fn episode(kind: ControllerKind, seed: u64) -> EpisodeOutput {
    let mut s = emv_workload(600, 3).scenario_for(seed).unwrap();
    s.events.push(ScenarioEvent::Regulation { movement: MovementId(3), start_time: 100, duration: 50 });
    let p = params();
    run_episode(&s, kind, Some(&p), Some(&BackendConfig::default()), &Default::default()).unwrap()
}

#[test]
fn every_controller_passes_the_safety_checks() {
    for kind in ControllerKind::ALL {
        for seed in 1..=3 {
            let ep = episode(kind, seed);
            assert_eq!(check_episode(&ep), vec![], "{} seed {seed}", kind.name());
        }
    }
}

#[test]
fn safety_checker_catches_tampered_logs() {
    let ep = episode(ControllerKind::Maxpressure, 2);
    let yellow_at = ep.log.iter().position(|e| e.kind == LogKind::Yellow).unwrap();

    let mut no_yellow = ep.clone();
    no_yellow.log.remove(yellow_at);
    assert!(check_episode(&no_yellow).iter().any(|v| matches!(v, Violation::Yellow { .. })));

    let mut early = ep.clone();
    let green_after = early.log.iter().skip(yellow_at).position(|e| e.kind == LogKind::Green).unwrap() + yellow_at;
    early.log[green_after].clock -= 1;
    assert!(check_episode(&early).iter().any(|v| matches!(v, Violation::Yellow { .. })));

    let mut short_green = ep.clone();
    short_green.min_green = 1_000;
    assert!(check_episode(&short_green).iter().any(|v| matches!(v, Violation::MinGreen { .. })));

    let mut lost = ep.clone();
    let arrive = lost.log.iter().position(|e| e.kind == LogKind::Arrive).unwrap();
    lost.log.remove(arrive);
    assert!(check_episode(&lost).iter().any(|v| matches!(v, Violation::Conservation { .. })));

    let mut forbidden = ep;
    let d = forbidden.decisions.iter_mut().find(|d| d.available.len() == 1).unwrap();
    d.executed = d.available[0] % 4 + 1;
    assert!(check_episode(&forbidden).iter().any(|v| matches!(v, Violation::Unavailable { .. })));
}

#[test]
fn metrics_recomputed_from_the_log_match_the_record() {
    for kind in [ControllerKind::Fixtime, ControllerKind::Webster, ControllerKind::Reasonlight] {
        let ep = episode(kind, 4);
        let mut from_log = metrics_from_log(&ep.log).unwrap();
        from_log.preserved = ep.metrics.preserved;
        from_log.refined = ep.metrics.refined;
        assert_eq!(from_log, ep.metrics, "{}", kind.name());
    }
}

#[test]
fn disabled_and_invalid_evaluators_reproduce_the_backbone() {
    let p = params();
    let s = emv_workload(400, 4).scenario_for(9).unwrap();
    let rl = run_episode(&s, ControllerKind::Rl, Some(&p), None, &Default::default()).unwrap();
    let off = BackendConfig { kind: BackendKind::Disabled, ..Default::default() };
    let ep = run_episode(&s, ControllerKind::Reasonlight, Some(&p), Some(&off), &Default::default()).unwrap();
    assert_eq!(ep.log_lines(), rl.log_lines());
    assert_eq!(ep.metrics.refined, 0);
    assert_eq!(ep.metrics.preserved, 400);
}

#[test]
fn single_seed_has_zero_spread() {
    assert_eq!(Stat::of(&[3.5]), Stat { mean: 3.5, std: 0.0, n: 1 });
    let s = Stat::of(&[1.0, 3.0]);
    assert_eq!((s.mean, s.std), (2.0, 1.0));
}

fn spec() -> EvalSpec {
    EvalSpec {
        workload: emv_workload(300, 2),
        controllers: vec![ControllerKind::Fixtime, ControllerKind::Maxpressure, ControllerKind::Reasonlight],
        seeds: vec![1, 2],
        backend: BackendConfig::default(),
        options: Default::default(),
    }
}

#[test]
fn evaluation_is_reproducible_and_exports_round_trip() {
    let p = params();
    let a = evaluate(&spec(), Some(&p)).unwrap();
    let b = evaluate(&spec(), Some(&p)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.config_digest, digest(&spec(), Some(&p)));
    assert_eq!(a.config_digest.len(), 64);
    let mut other = spec();
    other.seeds = vec![1, 3];
    assert_ne!(digest(&other, Some(&p)), a.config_digest);

    let dir = tempfile::tempdir().unwrap();
    write_csv(&a, dir.path().join("r.csv")).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("r.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[..4], ["seed", "scenario", "controller", "att"]);
    assert_eq!(rdr.records().count(), 6);
    write_json(&a, dir.path().join("r.json")).unwrap();
    assert_eq!(read_json(dir.path().join("r.json")).unwrap(), a);

    let table = summary_table(&a);
    assert_eq!(table.lines().count(), 4);
    assert!(table.contains("reasonlight"));
}

#[test]
fn evaluation_rejects_bad_specs() {
    let mut s = spec();
    s.seeds.clear();
    assert!(evaluate(&s, Some(&params())).is_err());
    assert!(evaluate(&spec(), None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn vehicles_are_conserved_under_any_demand(
        seed in 0u64..1000,
        rates in proptest::collection::vec(0.0f64..1500.0, 8),
        kind in prop::sample::select(vec![ControllerKind::Fixtime, ControllerKind::Webster, ControllerKind::Maxpressure]),
    ) {
        let mut s = short(300).with_seed(seed);
        s.demand.rates = Some(rates);
        let ep = run_episode(&s, kind, None, None, &Default::default()).unwrap();
        prop_assert_eq!(check_episode(&ep), vec![]);
        prop_assert_eq!(ep.entered, ep.metrics.completed + ep.metrics.emv_completed + ep.metrics.residual);
    }
}
