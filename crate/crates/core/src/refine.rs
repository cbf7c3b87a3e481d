//! Semantic action refinement: query an evaluator backend for a candidate
//! phase, accept it only when it is available, otherwise retry and finally
//! fall back to the RL proposal.

use std::collections::BTreeMap;
use std::io::Read as _;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::{Components, PromptContext, WireDocument};
use crate::sim::PhaseId;

pub const DEFAULT_ATTEMPTS: u32 = 3;
pub const DEFAULT_TIMEOUT_MS: u64 = 2000;
/// Environment variable consulted for the remote endpoint when none is
/// configured.
pub const ENDPOINT_ENV: &str = "TSC_BACKEND_ENDPOINT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    RuleBased,
    Remote,
    /// No evaluator: every decision keeps the RL proposal.
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub k: u32,
    pub timeout_ms: u64,
    pub endpoint: Option<String>,
    pub components: Components,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::RuleBased,
            k: DEFAULT_ATTEMPTS,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            endpoint: None,
            components: Components::FULL,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("backend.k must be at least 1".into()));
        }
        if self.kind == BackendKind::Remote {
            if self.timeout_ms == 0 {
                return Err(Error::Config("backend.timeout_ms must be positive for a remote backend".into()));
            }
            if self.resolved_endpoint().is_none() {
                return Err(Error::Config(format!("remote backend needs an endpoint or {ENDPOINT_ENV}")));
            }
        }
        Ok(())
    }

    pub fn resolved_endpoint(&self) -> Option<String> {
        self.endpoint.clone().or_else(|| std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()))
    }

    /// Instantiate the configured backend; `None` for a disabled one.
    pub fn build(&self) -> Result<Option<Box<dyn Backend>>> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::RuleBased => Some(Box::new(RuleBackend)),
            BackendKind::Remote => Some(Box::new(RemoteBackend::new(
                self.resolved_endpoint().expect("validated"),
                Duration::from_millis(self.timeout_ms),
            ))),
            BackendKind::Disabled => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("timeout: {0}")]
    Timeout(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed: {0}")]
    Malformed(String),
}

impl BackendError {
    pub fn class(&self) -> &'static str {
        match self {
            BackendError::Timeout(_) => "timeout",
            BackendError::Transport(_) => "transport",
            BackendError::Malformed(_) => "malformed",
        }
    }
}

/// An evaluator that maps a prompt context to raw response text.
pub trait Backend: Send {
    fn id(&self) -> &str;
    fn call(&mut self, ctx: &PromptContext) -> std::result::Result<String, BackendError>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorReply {
    pub action: i64,
    pub explanation: String,
}

/// Extract `(action, explanation)` from a response body. Anything other
/// than an object with an integer `action` and a string `explanation` is
/// malformed.
pub fn parse_response(body: &str) -> std::result::Result<EvaluatorReply, BackendError> {
    let v: serde_json::Value =
        serde_json::from_str(body.trim()).map_err(|e| BackendError::Malformed(format!("not JSON: {e}")))?;
    let obj = v.as_object().ok_or_else(|| BackendError::Malformed("response is not an object".into()))?;
    let action = obj
        .get("action")
        .ok_or_else(|| BackendError::Malformed("missing field `action`".into()))?
        .as_i64()
        .ok_or_else(|| BackendError::Malformed("`action` is not an integer".into()))?;
    let explanation = obj
        .get("explanation")
        .ok_or_else(|| BackendError::Malformed("missing field `explanation`".into()))?
        .as_str()
        .ok_or_else(|| BackendError::Malformed("`explanation` is not a string".into()))?
        .to_string();
    Ok(EvaluatorReply { action, explanation })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Accepted,
    OutOfSet,
    Timeout,
    Transport,
    Malformed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub candidate: Option<i64>,
    pub outcome: AttemptOutcome,
    pub detail: String,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementResult {
    /// Last parsed candidate, if any attempt produced one.
    pub candidate: Option<i64>,
    pub explanation: String,
    pub attempts: u32,
    pub accepted: bool,
    /// Executed phase equals the RL proposal.
    pub preserved: bool,
    pub executed: PhaseId,
    pub latency_ms: f64,
    pub trace: Vec<Attempt>,
    /// Fired guideline for the rule backend, backend id otherwise,
    /// `fallback` when no candidate was accepted.
    pub source: String,
}

impl RefinementResult {
    /// Result of a decision taken without any evaluator.
    pub fn keep(ctx: &PromptContext) -> Self {
        RefinementResult {
            candidate: None,
            explanation: String::new(),
            attempts: 0,
            accepted: false,
            preserved: true,
            executed: ctx.rl_action,
            latency_ms: 0.0,
            trace: vec![],
            source: "none".into(),
        }
    }

    /// One tab-separated decision record.
    pub fn log_line(&self, clock: u64, rl_action: PhaseId) -> String {
        let cands: Vec<String> =
            self.trace.iter().map(|a| a.candidate.map_or_else(|| "-".to_string(), |c| c.to_string())).collect();
        format!(
            "{clock}\ta_rl={rl_action}\tcandidates=[{}]\texecuted={}\tsource={}\tlatency_ms={:.3}",
            cands.join(","),
            self.executed,
            self.source,
            self.latency_ms
        )
    }
}

fn guideline_tag(explanation: &str) -> Option<&str> {
    let tag = explanation.split_whitespace().next()?;
    let tag = tag.trim_end_matches(':');
    (tag.len() == 2 && tag.starts_with('G') && tag.as_bytes()[1].is_ascii_digit()).then_some(tag)
}

/// Query the backend up to `k` times; the first available candidate is
/// executed, otherwise the RL proposal is. Never fails.
pub fn refine(ctx: &PromptContext, backend: &mut dyn Backend, k: u32) -> RefinementResult {
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut candidate = None;
    let mut explanation = String::new();
    for _ in 0..k.max(1) {
        let t0 = Instant::now();
        let reply = backend.call(ctx).and_then(|body| parse_response(&body));
        let latency_ms = t0.elapsed().as_secs_f64() * 1e3;
        match reply {
            Ok(r) => {
                candidate = Some(r.action);
                explanation = r.explanation;
                let ok = r.action > 0 && ctx.available.contains(PhaseId(r.action as usize));
                trace.push(Attempt {
                    candidate: Some(r.action),
                    outcome: if ok { AttemptOutcome::Accepted } else { AttemptOutcome::OutOfSet },
                    detail: String::new(),
                    latency_ms,
                });
                if ok {
                    let executed = PhaseId(r.action as usize);
                    let source = guideline_tag(&explanation).unwrap_or(backend.id()).to_string();
                    return RefinementResult {
                        candidate,
                        explanation,
                        attempts: trace.len() as u32,
                        accepted: true,
                        preserved: executed == ctx.rl_action,
                        executed,
                        latency_ms: start.elapsed().as_secs_f64() * 1e3,
                        trace,
                        source,
                    };
                }
            }
            Err(e) => {
                let outcome = match e {
                    BackendError::Timeout(_) => AttemptOutcome::Timeout,
                    BackendError::Transport(_) => AttemptOutcome::Transport,
                    BackendError::Malformed(_) => AttemptOutcome::Malformed,
                };
                trace.push(Attempt { candidate: None, outcome, detail: e.to_string(), latency_ms });
            }
        }
    }
    RefinementResult {
        candidate,
        explanation,
        attempts: trace.len() as u32,
        accepted: false,
        preserved: true,
        executed: ctx.rl_action,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        trace,
        source: "fallback".into(),
    }
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static pattern"))
}

/// What the rule evaluator reads back out of the prompt text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedScene {
    pub phase_movements: BTreeMap<usize, Vec<usize>>,
    /// (movement, reported queue position) per emergency-vehicle cue.
    pub emergencies: Vec<(usize, u64)>,
    pub barriers: Vec<usize>,
    /// Lane-summed occupancy per movement.
    pub occupancy: BTreeMap<usize, f64>,
    /// Phase currently showing green, if not in yellow.
    pub green_phase: Option<usize>,
    /// Seconds per discharged vehicle per movement.
    pub service_time: BTreeMap<usize, f64>,
    pub yellow: f64,
    pub min_green: f64,
}

pub fn parse_scene(ctx: &PromptContext) -> ParsedScene {
    static PHASE: OnceLock<Regex> = OnceLock::new();
    static EMV: OnceLock<Regex> = OnceLock::new();
    static BARRIER: OnceLock<Regex> = OnceLock::new();
    static OCC: OnceLock<Regex> = OnceLock::new();
    static GREEN: OnceLock<Regex> = OnceLock::new();
    static LANES: OnceLock<Regex> = OnceLock::new();
    static YELLOW: OnceLock<Regex> = OnceLock::new();
    static MIN_GREEN: OnceLock<Regex> = OnceLock::new();
    let phase_re = re(&PHASE, r"^Phase (\d+) serves movements ([\d, ]+)\.$");
    let emv_re = re(&EMV, r"emergency vehicle waiting on movement (\d+)\b.*queue position (\d+)");
    let barrier_re = re(&BARRIER, r"barrier blocking movement (\d+)\b");
    let occ_re = re(&OCC, r"^Movement (\d+): occupancy ([0-9.]+) \(max [0-9.]+\) on (\d+) lanes");
    let green_re = re(&GREEN, r"^Active phase (\d+), green");
    let lanes_re = re(&LANES, r"^Movement (\d+): .*, (\d+) lanes, ([0-9.]+) s saturation headway\.$");
    let yellow_re = re(&YELLOW, r"inserts (\d+) s of yellow");
    let min_green_re = re(&MIN_GREEN, r"lasts at least (\d+) s");

    let mut s = ParsedScene::default();
    for line in &ctx.rules.phases {
        if let Some(c) = phase_re.captures(line) {
            let ms = c[2].split(',').filter_map(|m| m.trim().parse().ok()).collect();
            s.phase_movements.insert(c[1].parse().unwrap_or(0), ms);
        }
    }
    for line in &ctx.rules.movements {
        if let Some(c) = lanes_re.captures(line) {
            let lanes: f64 = c[2].parse().unwrap_or(1.0);
            let headway: f64 = c[3].parse().unwrap_or(0.0);
            s.service_time.insert(c[1].parse().unwrap_or(0), headway / lanes.max(1.0));
        }
    }
    for line in &ctx.rules.constraints {
        if let Some(c) = yellow_re.captures(line) {
            s.yellow = c[1].parse().unwrap_or(0.0);
        }
        if let Some(c) = min_green_re.captures(line) {
            s.min_green = c[1].parse().unwrap_or(0.0);
        }
    }
    for line in ctx.omega_v.lines() {
        if let Some(c) = emv_re.captures(line) {
            s.emergencies.push((c[1].parse().unwrap_or(0), c[2].parse().unwrap_or(u64::MAX)));
        } else if let Some(c) = barrier_re.captures(line) {
            s.barriers.push(c[1].parse().unwrap_or(0));
        }
    }
    for line in ctx.omega_s.lines() {
        if let Some(c) = green_re.captures(line) {
            s.green_phase = c[1].parse().ok();
        } else if let Some(c) = occ_re.captures(line) {
            let lanes: f64 = c[3].parse().unwrap_or(1.0);
            s.occupancy.insert(c[1].parse().unwrap_or(0), lanes * c[2].parse::<f64>().unwrap_or(0.0));
        }
    }
    s
}

impl ParsedScene {
    fn serves(&self, phase: PhaseId, movement: usize) -> bool {
        self.phase_movements.get(&phase.0).is_some_and(|ms| ms.contains(&movement))
    }
}

/// Deterministic evaluator over the prompt text. With guidelines off it
/// keeps the proposal (G0); otherwise G1 emergency priority, G2 barrier
/// avoidance, G3 keep. Without the chain component G1 takes the lowest
/// serving phase id; with it, G1 takes the phase that minimizes the summed
/// estimated wait of all visible emergency vehicles.
pub fn rule_decide(ctx: &PromptContext) -> (PhaseId, String) {
    let a_rl = ctx.rl_action;
    if !ctx.components.guidelines {
        return (a_rl, format!("G0 keep RL proposal phase {a_rl}."));
    }
    let scene = parse_scene(ctx);
    let chain = ctx.components.chain;
    let mut steps = Vec::new();
    if chain {
        steps.push(format!("RL proposes phase {a_rl}."));
        steps.push(format!(
            "Cues: {} emergency vehicle(s), {} barrier(s).",
            scene.emergencies.len(),
            scene.barriers.len()
        ));
        let avail: Vec<String> = ctx.available.iter().map(|p| p.to_string()).collect();
        steps.push(format!("Available phases: {}.", avail.join(", ")));
    }
    let finish = |tag: &str, phase: PhaseId, why: String, mut steps: Vec<String>| {
        if chain {
            steps.push(format!("Choose phase {phase}."));
            (phase, format!("{tag} {why} Steps: {}", steps.join(" ")))
        } else {
            (phase, format!("{tag} {why}"))
        }
    };

    let feasible: Vec<(usize, u64)> =
        scene.emergencies.iter().copied().filter(|(m, _)| !scene.barriers.contains(m)).collect();
    let serving: Vec<PhaseId> =
        ctx.available.iter().filter(|p| feasible.iter().any(|(m, _)| scene.serves(*p, *m))).collect();
    if !serving.is_empty() {
        // summed wait of all visible emergency vehicles if `p` is served
        // first and every other phase after one more clearance
        let cost = |p: PhaseId| {
            let green = scene.green_phase == Some(p.0);
            let switch = if green { 0.0 } else { scene.yellow };
            let clear = |m: usize, pos: u64| pos as f64 * scene.service_time.get(&m).copied().unwrap_or(1.0);
            let mut hold = if green { 0.0 } else { scene.min_green };
            let mut total = 0.0;
            for &(m, pos) in feasible.iter().filter(|(m, _)| scene.serves(p, *m)) {
                hold = f64::max(hold, clear(m, pos));
                total += switch + clear(m, pos);
            }
            for &(m, pos) in feasible.iter().filter(|(m, _)| !scene.serves(p, *m)) {
                total += switch + hold + scene.yellow + clear(m, pos);
            }
            total
        };
        let pick = if !chain {
            serving[0]
        } else {
            let mut best = serving[0];
            for &p in &serving[1..] {
                if cost(p) < cost(best) {
                    best = p;
                }
            }
            for &p in &serving {
                steps.push(format!("Serving phase {p} first costs emergency vehicles about {:.1} s in total.", cost(p)));
            }
            best
        };
        let m = feasible.iter().find(|(m, _)| scene.serves(pick, *m)).map(|(m, _)| *m).unwrap_or(0);
        return finish("G1", pick, format!("emergency vehicle on movement {m} is served by phase {pick}."), steps);
    }

    let blocked_rl: Vec<usize> = scene.barriers.iter().copied().filter(|m| scene.serves(a_rl, *m)).collect();
    if let Some(&m) = blocked_rl.first() {
        let unblocked_occ = |p: PhaseId| -> f64 {
            scene
                .phase_movements
                .get(&p.0)
                .map(|ms| {
                    ms.iter()
                        .filter(|m| !scene.barriers.contains(m))
                        .map(|m| scene.occupancy.get(m).copied().unwrap_or(0.0))
                        .sum()
                })
                .unwrap_or(0.0)
        };
        let mut best = ctx.available.as_slice()[0];
        for p in ctx.available.iter() {
            if unblocked_occ(p) > unblocked_occ(best) {
                best = p;
            }
        }
        if chain {
            steps.push(format!("Phase {a_rl} serves blocked movement {m}; phase {best} has the most unblocked queue."));
        }
        return finish("G2", best, format!("barrier blocks movement {m} served by phase {a_rl}."), steps);
    }
    finish("G3", a_rl, format!("no cue overrides phase {a_rl}."), steps)
}

/// In-process evaluator running [`rule_decide`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleBackend;

impl Backend for RuleBackend {
    fn id(&self) -> &str {
        "rule"
    }

    fn call(&mut self, ctx: &PromptContext) -> std::result::Result<String, BackendError> {
        let (phase, explanation) = rule_decide(ctx);
        Ok(serde_json::to_string(&EvaluatorReply { action: phase.0 as i64, explanation }).expect("reply serializes"))
    }
}

/// HTTP evaluator: POSTs the wire document as JSON to `endpoint`.
pub struct RemoteBackend {
    endpoint: String,
    timeout: Duration,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(endpoint: String, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        RemoteBackend { endpoint, timeout, agent }
    }
}

fn is_timeout(e: &(dyn std::error::Error + 'static)) -> bool {
    let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(e);
    while let Some(err) = cur {
        if let Some(io) = err.downcast_ref::<std::io::Error>() {
            if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        cur = err.source();
    }
    false
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        "remote"
    }

    fn call(&mut self, ctx: &PromptContext) -> std::result::Result<String, BackendError> {
        let timeout_msg = || format!("no reply within {} ms", self.timeout.as_millis());
        let resp = self.agent.post(&self.endpoint).set("Content-Type", "application/json").send_string(&ctx.to_json());
        let resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => return Err(BackendError::Transport(format!("HTTP status {code}"))),
            Err(ureq::Error::Transport(t)) => {
                return Err(if is_timeout(&t) { BackendError::Timeout(timeout_msg()) } else {
                    BackendError::Transport(t.to_string())
                })
            }
        };
        let mut body = String::new();
        resp.into_reader().read_to_string(&mut body).map_err(|e| {
            if is_timeout(&e) {
                BackendError::Timeout(timeout_msg())
            } else {
                BackendError::Malformed(format!("body is not UTF-8 text: {e}"))
            }
        })?;
        Ok(body)
    }
}

/// Behaviour of the bundled test double for the remote protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FakeMode {
    /// Answer with the rule evaluator.
    Rule,
    /// JSON without an `action` field.
    Malformed,
    /// A well-formed reply naming a phase that does not exist.
    Invalid,
    /// Reply only after the delay.
    Timeout,
    /// Non-JSON body.
    Garbage,
}

pub struct FakeServer {
    addr: String,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl FakeServer {
    /// Bind `addr` (port 0 picks a free port) and serve in a background
    /// thread until dropped.
    pub fn start(addr: &str, mode: FakeMode, delay: Duration) -> Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        let addr = server
            .server_addr()
            .to_ip()
            .map(|a| a.to_string())
            .ok_or_else(|| Error::Config("fake backend must bind an IP address".into()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(req)) => {
                        std::thread::spawn(move || serve_one(req, mode, delay));
                    }
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });
        Ok(FakeServer { addr, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/", self.addr)
    }

    /// Block until the server stops; used by the CLI.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Reply the fake server gives to one request body.
pub fn fake_reply(body: &str, mode: FakeMode) -> String {
    match mode {
        FakeMode::Rule | FakeMode::Timeout => {
            let ctx = serde_json::from_str::<WireDocument>(body)
                .map_err(Error::from)
                .and_then(|d| PromptContext::from_wire(&d));
            match ctx {
                Ok(ctx) => {
                    let (phase, explanation) = rule_decide(&ctx);
                    serde_json::json!({"action": phase.0, "explanation": explanation}).to_string()
                }
                Err(e) => serde_json::json!({"error": e.to_string()}).to_string(),
            }
        }
        FakeMode::Malformed => serde_json::json!({"explanation": "no action given"}).to_string(),
        FakeMode::Invalid => serde_json::json!({"action": 99, "explanation": "phase 99"}).to_string(),
        FakeMode::Garbage => "the light should be green".to_string(),
    }
}

fn serve_one(mut req: tiny_http::Request, mode: FakeMode, delay: Duration) {
    let mut body = String::new();
    let _ = req.as_reader().read_to_string(&mut body);
    if mode == FakeMode::Timeout {
        std::thread::sleep(delay);
    }
    let reply = fake_reply(&body, mode);
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let _ = req.respond(tiny_http::Response::from_string(reply).with_header(header));
}
