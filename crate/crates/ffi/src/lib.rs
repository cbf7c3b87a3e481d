//! C ABI over `tsc-core`.
//!
//! Every function returns a [`TscStatus`]; on failure the message is kept
//! per thread and read with [`tsc_last_error`]. Handles are opaque and
//! owned by the caller until passed to their `_free` function. Phase ids
//! are 1-based, as in the core crate. No function unwinds across the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tsc_core::checkpoint::Checkpoint;
use tsc_core::harness::{metrics_from_vehicles, run_episode, ControllerKind, MetricsRecord};
use tsc_core::nn::PolicyParams;
use tsc_core::ppo::{phase_map, select_action, ActionMode};
use tsc_core::refine::{rule_decide, BackendConfig};
use tsc_core::semantics::PromptContext;
use tsc_core::sensing::{available_phases, build_sensor_state, ObservationWindow, DEFAULT_FLOW_WINDOW, FEATURE_DIM};
use tsc_core::sim::{PhaseId, RequestOutcome, ScenarioConfig, WorldState};
use tsc_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TscStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Domain = 4,
    Numeric = 5,
    Contract = 6,
    Serialization = 7,
    Io = 8,
    /// The output buffer is smaller than the value; the required length
    /// was still written.
    BufferTooSmall = 9,
    Training = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TscController {
    FixTime = 0,
    Webster = 1,
    MaxPressure = 2,
    Rl = 3,
    ReasonLight = 4,
}

impl From<TscController> for ControllerKind {
    fn from(c: TscController) -> Self {
        match c {
            TscController::FixTime => ControllerKind::Fixtime,
            TscController::Webster => ControllerKind::Webster,
            TscController::MaxPressure => ControllerKind::Maxpressure,
            TscController::Rl => ControllerKind::Rl,
            TscController::ReasonLight => ControllerKind::Reasonlight,
        }
    }
}

/// Outcome of a phase request, mirroring the simulator's.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TscRequest {
    NoOp = 0,
    Accepted = 1,
    RejectedMinGreen = 2,
    IgnoredYellow = 3,
}

/// Episode metrics. Emergency fields are NaN when no emergency vehicle
/// completed.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TscMetrics {
    pub att: f64,
    pub awt: f64,
    pub aett: f64,
    pub aewt: f64,
    pub completed: u64,
    pub emv_completed: u64,
    pub residual: u64,
    pub preserved: u64,
    pub refined: u64,
}

impl From<&MetricsRecord> for TscMetrics {
    fn from(m: &MetricsRecord) -> Self {
        TscMetrics {
            att: m.att,
            awt: m.awt,
            aett: m.aett.unwrap_or(f64::NAN),
            aewt: m.aewt.unwrap_or(f64::NAN),
            completed: m.completed,
            emv_completed: m.emv_completed,
            residual: m.residual,
            preserved: m.preserved,
            refined: m.refined,
        }
    }
}

/// A running simulation plus the observation window a policy reads.
pub struct TscSim {
    world: WorldState,
    window: ObservationWindow,
    observed_at: Option<u64>,
}

pub struct TscPolicy {
    params: PolicyParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TscStatus {
    match e {
        Error::Config(_) => TscStatus::Config,
        Error::Domain(_) => TscStatus::Domain,
        Error::Numeric(_) => TscStatus::Numeric,
        Error::Training(_) => TscStatus::Training,
        Error::Contract(_) => TscStatus::Contract,
        Error::Serialization(_) => TscStatus::Serialization,
        Error::Io(_) => TscStatus::Io,
    }
}

struct Fail(TscStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TscStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TscStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TscStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TscStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(TscStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn scenario(toml: *const c_char) -> Result<ScenarioConfig, Fail> {
    if toml.is_null() {
        return Ok(ScenarioConfig::default());
    }
    Ok(ScenarioConfig::from_toml_str(text(toml, "scenario")?)?)
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copy `src` into `dst[..cap]`, always reporting the full length.
unsafe fn fill<T: Copy>(src: &[T], dst: *mut T, cap: usize, len: *mut usize) -> Result<(), Fail> {
    *out(len, "out_len")? = src.len();
    if src.len() > cap {
        return Err(Fail(TscStatus::BufferTooSmall, format!("need {} elements, buffer holds {cap}", src.len())));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tsc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; valid until the next
/// failing call on the same thread. Empty when nothing failed yet.
#[no_mangle]
pub extern "C" fn tsc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build a simulation from a scenario TOML document (NULL for the default
/// scenario) with a `window`-frame observation history (0 for the default).
///
/// # Safety
/// `scenario_toml` is NULL or a valid C string; `out_sim` is writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_sim_new(scenario_toml: *const c_char, window: usize, out_sim: *mut *mut TscSim) -> TscStatus {
    guard(|| {
        let slot = out(out_sim, "out_sim")?;
        *slot = ptr::null_mut();
        let world = scenario(scenario_toml)?.build_world()?;
        let k = if window == 0 { tsc_core::sensing::DEFAULT_WINDOW_K } else { window };
        let window = ObservationWindow::new(k, world.intersection.movements.len());
        *slot = Box::into_raw(Box::new(TscSim { world, window, observed_at: None }));
        Ok(())
    })
}

/// # Safety
/// `sim` is NULL or a handle from [`tsc_sim_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tsc_sim_free(sim: *mut TscSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Advance one second.
///
/// # Safety
/// `sim` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn tsc_sim_step(sim: *mut TscSim) -> TscStatus {
    guard(|| {
        out(sim, "sim")?.world.step();
        Ok(())
    })
}

/// # Safety
/// `sim` is a live handle; `outcome` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_sim_request_phase(sim: *mut TscSim, phase: u32, outcome: *mut TscRequest) -> TscStatus {
    guard(|| {
        let r = out(sim, "sim")?.world.request_phase(PhaseId(phase as usize))?;
        if let Some(o) = outcome.as_mut() {
            *o = match r {
                RequestOutcome::NoOp => TscRequest::NoOp,
                RequestOutcome::Accepted => TscRequest::Accepted,
                RequestOutcome::RejectedMinGreen => TscRequest::RejectedMinGreen,
                RequestOutcome::IgnoredYellow => TscRequest::IgnoredYellow,
            };
        }
        Ok(())
    })
}

/// # Safety
/// `sim` is a live handle; `clock` is writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_sim_clock(sim: *const TscSim, clock: *mut u64) -> TscStatus {
    guard(|| {
        *out(clock, "clock")? = sim.as_ref().ok_or_else(|| null("sim"))?.world.clock;
        Ok(())
    })
}

/// Movement and phase counts of the intersection.
///
/// # Safety
/// `sim` is a live handle; both outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_sim_shape(sim: *const TscSim, movements: *mut usize, phases: *mut usize) -> TscStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        *out(movements, "movements")? = s.world.intersection.movements.len();
        *out(phases, "phases")? = s.world.num_phases();
        Ok(())
    })
}

/// Phases admissible at the current tick, ascending.
///
/// # Safety
/// `sim` is a live handle; `phases` holds `cap` elements; `len` is writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_sim_available(sim: *const TscSim, phases: *mut u32, cap: usize, len: *mut usize) -> TscStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        let ids: Vec<u32> = available_phases(&s.world).iter().map(|p| p.0 as u32).collect();
        fill(&ids, phases, cap, len)
    })
}

/// Current sensor state, movements x 7 features, row-major.
///
/// # Safety
/// `sim` is a live handle; `features` holds `cap` elements; `len` is writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_sim_sensor(
    sim: *const TscSim,
    flow_window: u64,
    features: *mut f64,
    cap: usize,
    len: *mut usize,
) -> TscStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        let w = if flow_window == 0 { DEFAULT_FLOW_WINDOW } else { flow_window };
        let flat = build_sensor_state(&s.world, w).to_flat();
        debug_assert_eq!(flat.len(), s.world.intersection.movements.len() * FEATURE_DIM);
        fill(&flat, features, cap, len)
    })
}

/// Metrics over vehicles completed so far; queued vehicles count as residual.
///
/// # Safety
/// `sim` is a live handle; `metrics` is writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_sim_metrics(sim: *const TscSim, metrics: *mut TscMetrics) -> TscStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        let m = metrics_from_vehicles(&s.world.completed, s.world.in_queue() as u64);
        *out(metrics, "metrics")? = TscMetrics::from(&m);
        Ok(())
    })
}

/// # Safety
/// `path` is a valid C string; `out_policy` is writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_policy_load(path: *const c_char, out_policy: *mut *mut TscPolicy) -> TscStatus {
    guard(|| {
        let slot = out(out_policy, "out_policy")?;
        *slot = ptr::null_mut();
        let ck = Checkpoint::load(text(path, "path")?)?;
        *slot = Box::into_raw(Box::new(TscPolicy { params: ck.params }));
        Ok(())
    })
}

/// # Safety
/// `policy` is NULL or a handle from [`tsc_policy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tsc_policy_free(policy: *mut TscPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Greedy policy phase for the current tick. Records the tick's sensor
/// frame in the simulation's window once per clock value.
///
/// # Safety
/// Both handles are live; `phase` is writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_policy_act(policy: *const TscPolicy, sim: *mut TscSim, phase: *mut u32) -> TscStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let s = out(sim, "sim")?;
        if p.params.cfg.window != s.window.k() {
            return Err(Fail(
                TscStatus::Contract,
                format!("policy reads {} frames, simulation keeps {}", p.params.cfg.window, s.window.k()),
            ));
        }
        if s.observed_at != Some(s.world.clock) {
            s.window.push(build_sensor_state(&s.world, DEFAULT_FLOW_WINDOW))?;
            s.observed_at = Some(s.world.clock);
        }
        let phases = phase_map(&s.world.intersection);
        let avail = available_phases(&s.world);
        let mut rng = rand_free_rng();
        let choice = select_action(&p.params, &s.window, &phases, &avail, ActionMode::Greedy, &mut rng)?;
        *out(phase, "phase")? = choice.phase.0 as u32;
        Ok(())
    })
}

// greedy selection never draws
fn rand_free_rng() -> impl rand::Rng {
    rand::rngs::mock::StepRng::new(0, 0)
}

/// Run one full episode. `policy` may be NULL for the fixed baselines;
/// reasonlight uses the rule-based evaluator with all prompt components.
///
/// # Safety
/// `scenario_toml` is NULL or a valid C string; `policy` is NULL or live;
/// `metrics` is writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_run_episode(
    scenario_toml: *const c_char,
    controller: TscController,
    policy: *const TscPolicy,
    metrics: *mut TscMetrics,
) -> TscStatus {
    guard(|| {
        let sc = scenario(scenario_toml)?;
        let params = policy.as_ref().map(|p| &p.params);
        let ep = run_episode(&sc, controller.into(), params, Some(&BackendConfig::default()), &Default::default())?;
        *out(metrics, "metrics")? = TscMetrics::from(&ep.metrics);
        Ok(())
    })
}

/// Rule-based evaluator over a wire-format prompt document (JSON). Writes
/// the chosen phase and, when `explanation` is non-NULL, the NUL-terminated
/// explanation; `explanation_len` receives its length including the NUL.
///
/// # Safety
/// `wire_json` is a valid C string; `phase` and `explanation_len` are
/// writable; `explanation` is NULL or holds `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn tsc_refine_rule(
    wire_json: *const c_char,
    phase: *mut u32,
    explanation: *mut c_char,
    cap: usize,
    explanation_len: *mut usize,
) -> TscStatus {
    guard(|| {
        let ctx = PromptContext::from_json(text(wire_json, "wire_json")?)?;
        let (p, why) = rule_decide(&ctx);
        *out(phase, "phase")? = p.0 as u32;
        let bytes = CString::new(why).map_err(|_| Fail(TscStatus::Contract, "explanation holds NUL".into()))?;
        let bytes = bytes.as_bytes_with_nul();
        if explanation.is_null() {
            *out(explanation_len, "explanation_len")? = bytes.len();
            return Ok(());
        }
        fill(bytes, explanation.cast::<u8>(), cap, explanation_len)
    })
}
