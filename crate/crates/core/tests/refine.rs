//! Refinement loop invariants and the remote evaluator protocol against
//! the bundled fake server.

mod common;

use std::time::Duration;

use common::four_leg_ctx;
use proptest::prelude::*;
use tsc_core::harness::{run_episode, ControllerKind, EmergencySpec, Workload};
use tsc_core::nn::PolicyParams;
use tsc_core::ppo::PpoConfig;
use tsc_core::refine::{
    refine, AttemptOutcome, Backend, BackendConfig, BackendError, BackendKind, FakeMode, FakeServer, RemoteBackend,
};
use tsc_core::semantics::Components;
use tsc_core::sim::{PhaseId, ScenarioConfig};

const EMV_ON_4: &str =
    "Direction 2 (E): emergency vehicle waiting on movement 4 (E left), queue position 1 of 3 vehicles.";
const GREEN_1: &str = "Active phase 1, green for 25 s.";

struct Scripted(Vec<Result<String, BackendError>>, usize);

impl Backend for Scripted {
    fn id(&self) -> &str {
        "scripted"
    }

    fn call(&mut self, _: &tsc_core::semantics::PromptContext) -> Result<String, BackendError> {
        let r = self.0[self.1 % self.0.len()].clone();
        self.1 += 1;
        r
    }
}

fn reply_strategy() -> impl Strategy<Value = Result<String, BackendError>> {
    prop_oneof![
        (-2i64..7).prop_map(|a| Ok(format!(r#"{{"action": {a}, "explanation": "x"}}"#))),
        Just(Ok("not json".to_string())),
        Just(Ok(r#"{"action": "2"}"#.to_string())),
        Just(Err(BackendError::Timeout("t".into()))),
        Just(Err(BackendError::Transport("refused".into()))),
    ]
}

proptest! {
    #[test]
    fn refine_never_leaves_the_available_set(
        replies in proptest::collection::vec(reply_strategy(), 1..6),
        k in 1u32..5,
        mask in proptest::collection::vec(any::<bool>(), 4),
        pick in any::<proptest::sample::Index>(),
    ) {
        let avail: Vec<usize> = (1..=4).filter(|i| mask[i - 1]).collect();
        prop_assume!(!avail.is_empty());
        let rl = avail[pick.index(avail.len())];
        let ctx = four_leg_ctx("", GREEN_1, rl, &avail, Components::FULL);
        let mut b = Scripted(replies.clone(), 0);
        let r = refine(&ctx, &mut b, k);
        prop_assert!(r.attempts >= 1 && r.attempts <= k);
        prop_assert_eq!(r.trace.len() as u32, r.attempts);
        prop_assert!(avail.contains(&r.executed.0));
        prop_assert_eq!(r.preserved, r.executed.0 == rl);
        let first_ok = r.trace.iter().position(|a| a.outcome == AttemptOutcome::Accepted);
        match first_ok {
            Some(i) => {
                prop_assert!(r.accepted);
                prop_assert_eq!(i as u32 + 1, r.attempts);
            }
            None => {
                prop_assert!(!r.accepted);
                prop_assert_eq!(r.attempts, k);
                prop_assert_eq!(r.executed.0, rl);
                prop_assert_eq!(r.source.as_str(), "fallback");
            }
        }
    }
}

fn remote(server: &FakeServer, timeout_ms: u64) -> RemoteBackend {
    RemoteBackend::new(server.url(), Duration::from_millis(timeout_ms))
}

#[test]
fn happy_path_accepts_the_first_reply() {
    let server = FakeServer::start("127.0.0.1:0", FakeMode::Rule, Duration::ZERO).unwrap();
    let ctx = four_leg_ctx(EMV_ON_4, GREEN_1, 1, &[1, 2, 3, 4], Components::GUIDELINES);
    let r = refine(&ctx, &mut remote(&server, 2000), 3);
    assert!(r.accepted);
    assert_eq!(r.attempts, 1);
    assert_eq!(r.executed, PhaseId(2));
    assert_eq!(r.source, "G1");
    assert!(!r.preserved);
}

#[test]
fn malformed_and_garbage_replies_are_classified_and_fall_back() {
    for mode in [FakeMode::Malformed, FakeMode::Garbage] {
        let server = FakeServer::start("127.0.0.1:0", mode, Duration::ZERO).unwrap();
        let ctx = four_leg_ctx(EMV_ON_4, GREEN_1, 1, &[1, 2], Components::FULL);
        let r = refine(&ctx, &mut remote(&server, 2000), 3);
        assert_eq!(r.attempts, 3, "{mode:?}");
        assert!(r.trace.iter().all(|a| a.outcome == AttemptOutcome::Malformed), "{mode:?}");
        assert_eq!(r.executed, PhaseId(1));
        assert!(r.preserved);
    }
}

#[test]
fn out_of_set_replies_fall_back() {
    let server = FakeServer::start("127.0.0.1:0", FakeMode::Invalid, Duration::ZERO).unwrap();
    let ctx = four_leg_ctx(EMV_ON_4, GREEN_1, 3, &[1, 3], Components::FULL);
    let r = refine(&ctx, &mut remote(&server, 2000), 3);
    assert_eq!(r.attempts, 3);
    assert!(r.trace.iter().all(|a| a.outcome == AttemptOutcome::OutOfSet && a.candidate == Some(99)));
    assert_eq!((r.executed, r.source.as_str()), (PhaseId(3), "fallback"));
}

#[test]
fn slow_replies_are_timeouts() {
    let server = FakeServer::start("127.0.0.1:0", FakeMode::Timeout, Duration::from_millis(800)).unwrap();
    let ctx = four_leg_ctx(EMV_ON_4, GREEN_1, 1, &[1, 2], Components::FULL);
    let r = refine(&ctx, &mut remote(&server, 150), 3);
    assert_eq!(r.attempts, 3);
    assert!(r.trace.iter().all(|a| a.outcome == AttemptOutcome::Timeout), "{:?}", r.trace);
    assert!(r.trace.iter().all(|a| a.latency_ms < 700.0));
    assert_eq!(r.executed, PhaseId(1));
}

#[test]
fn refused_connection_is_a_transport_error() {
    let server = FakeServer::start("127.0.0.1:0", FakeMode::Rule, Duration::ZERO).unwrap();
    let url = server.url();
    drop(server);
    let ctx = four_leg_ctx("", GREEN_1, 1, &[1], Components::FULL);
    let mut b = RemoteBackend::new(url, Duration::from_millis(500));
    let r = refine(&ctx, &mut b, 2);
    assert_eq!(r.attempts, 2);
    assert!(r.trace.iter().all(|a| a.outcome == AttemptOutcome::Transport), "{:?}", r.trace);
}

#[test]
fn remote_rule_server_reproduces_the_local_rule_backend() {
    let server = FakeServer::start("127.0.0.1:0", FakeMode::Rule, Duration::ZERO).unwrap();
    let config = PpoConfig::default();
    let params = PolicyParams::init(config.net, 7);
    let mut sc = ScenarioConfig::default();
    sc.sim.duration = 240;
    let w = Workload {
        name: "emv".into(),
        scenario: sc,
        emergencies: Some(EmergencySpec { count: 4, from: 20, to: 200, exclude: vec![] }),
    };
    let s = w.scenario_for(5).unwrap();
    let local = BackendConfig::default();
    let far = BackendConfig { kind: BackendKind::Remote, endpoint: Some(server.url()), ..Default::default() };
    let a = run_episode(&s, ControllerKind::Reasonlight, Some(&params), Some(&local), &Default::default()).unwrap();
    let b = run_episode(&s, ControllerKind::Reasonlight, Some(&params), Some(&far), &Default::default()).unwrap();
    assert_eq!(a.log_lines(), b.log_lines());
    assert_eq!(a.metrics.refined, b.metrics.refined);
    assert!(a.metrics.refined > 0);
}
