//! Reference controllers: fixed-time cycling, Webster-planned cycling and
//! MaxPressure.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sensing::{AvailablePhases, ObservationWindow};
use crate::sim::{Intersection, PhaseId, WorldState};

/// Everything a controller may look at when choosing a phase.
#[derive(Clone, Copy)]
pub struct DecisionContext<'a> {
    pub world: &'a WorldState,
    pub window: &'a ObservationWindow,
    pub avail: &'a AvailablePhases,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControllerDecision {
    pub target: PhaseId,
    pub reason: &'static str,
}

pub trait Controller {
    fn name(&self) -> &'static str;
    fn decide(&mut self, ctx: &DecisionContext) -> Result<ControllerDecision>;
}

fn next_phase(x: &Intersection, p: PhaseId) -> PhaseId {
    PhaseId(p.0 % x.phases.len() + 1)
}

/// Phase the signal is committed to while yellow runs.
fn hold(world: &WorldState) -> ControllerDecision {
    ControllerDecision { target: world.signal.next_green(), reason: "hold" }
}

pub const FIXTIME_PHASE_LEN: u32 = 30;

/// Decision of the fixed-time plan: cycle phases in id order, switching
/// when the active green reaches `phase_len` seconds.
pub fn fixtime(world: &WorldState, phase_len: u32) -> ControllerDecision {
    let sig = &world.signal;
    if sig.in_yellow || sig.phase_elapsed < phase_len {
        return hold(world);
    }
    ControllerDecision { target: next_phase(&world.intersection, sig.active_phase), reason: "cycle" }
}

#[derive(Clone, Debug)]
pub struct FixTime {
    pub phase_len: u32,
}

impl Default for FixTime {
    fn default() -> Self {
        FixTime { phase_len: FIXTIME_PHASE_LEN }
    }
}

impl Controller for FixTime {
    fn name(&self) -> &'static str {
        "fixtime"
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<ControllerDecision> {
        Ok(fixtime(ctx.world, self.phase_len))
    }
}

pub const WEBSTER_MIN_CYCLE: f64 = 30.0;
pub const WEBSTER_MAX_CYCLE: f64 = 120.0;
pub const WEBSTER_REPLAN: u64 = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WebsterPlan {
    /// Critical flow ratio per phase.
    pub flow_ratios: Vec<f64>,
    pub total_ratio: f64,
    pub lost_time: f64,
    /// `(1.5 L + 5) / (1 - Y)` clamped to [30, 120].
    pub webster_cycle: f64,
    /// Executed cycle: the Webster cycle, raised when needed so that every
    /// phase can hold its minimum green.
    pub cycle: f64,
    /// Effective green per phase; sums with the lost time to `cycle`.
    pub greens: Vec<f64>,
    pub saturated: bool,
}

/// Classical Webster cycle `(1.5 L + 5) / (1 - Y)` clamped to [30, 120] s.
/// Returns (cycle, saturated).
pub fn webster_cycle(lost_time: f64, total_ratio: f64) -> (f64, bool) {
    if total_ratio >= 1.0 {
        return (WEBSTER_MAX_CYCLE, true);
    }
    let c = (1.5 * lost_time + 5.0) / (1.0 - total_ratio);
    (c.clamp(WEBSTER_MIN_CYCLE, WEBSTER_MAX_CYCLE), false)
}

/// Split `available` green seconds in proportion to `weights`, with every
/// share at least `floor`. Phases pinned at the floor are removed and the
/// rest re-split until stable.
fn floored_split(weights: &[f64], available: f64, floor: f64) -> Vec<f64> {
    let n = weights.len();
    let mut pinned = vec![false; n];
    loop {
        let free = available - floor * pinned.iter().filter(|p| **p).count() as f64;
        let wsum: f64 = weights.iter().zip(&pinned).filter(|(_, p)| !**p).map(|(w, _)| *w).sum();
        let nfree = pinned.iter().filter(|p| !**p).count();
        let share = |w: f64| if wsum > 0.0 { w / wsum * free } else { free / nfree.max(1) as f64 };
        let mut changed = false;
        for i in 0..n {
            if !pinned[i] && share(weights[i]) < floor {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed || pinned.iter().all(|p| *p) {
            return (0..n).map(|i| if pinned[i] { floor } else { share(weights[i]) }).collect();
        }
    }
}

/// Plan a cycle from per-movement flows (veh/s).
pub fn webster_plan(flows: &[f64], x: &Intersection, yellow: u32, min_green: u32) -> WebsterPlan {
    let flow_ratios: Vec<f64> = x
        .phases
        .iter()
        .map(|p| {
            p.movements
                .iter()
                .map(|m| {
                    let mv = x.movement(*m).expect("phase references a known movement");
                    flows[m.index()] / mv.service_rate()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let total_ratio: f64 = flow_ratios.iter().sum();
    let lost_time = (x.phases.len() as u32 * yellow) as f64;
    let (webster_cycle, saturated) = webster_cycle(lost_time, total_ratio);
    let floor = min_green as f64;
    let cycle = webster_cycle.max(lost_time + floor * x.phases.len() as f64);
    let weights = if total_ratio > 0.0 { flow_ratios.clone() } else { vec![1.0; x.phases.len()] };
    let greens = floored_split(&weights, cycle - lost_time, floor);
    WebsterPlan { flow_ratios, total_ratio, lost_time, webster_cycle, cycle, greens, saturated }
}

/// Runs the current Webster plan cyclically, replanning every 300 s from
/// arrivals over the trailing 300 s.
#[derive(Clone, Debug, Default)]
pub struct Webster {
    plan: Option<WebsterPlan>,
    planned_at: u64,
}

impl Webster {
    pub fn plan(&self) -> Option<&WebsterPlan> {
        self.plan.as_ref()
    }

    fn replan(&mut self, world: &WorldState) {
        let window = (world.clock as usize).clamp(1, WEBSTER_REPLAN as usize);
        let flows: Vec<f64> = world.recent_arrivals(window).iter().map(|a| *a as f64 / window as f64).collect();
        let flows = if world.clock == 0 { vec![0.0; flows.len()] } else { flows };
        self.plan = Some(webster_plan(&flows, &world.intersection, world.signal.yellow_len, world.signal.min_green));
        self.planned_at = world.clock;
    }
}

impl Controller for Webster {
    fn name(&self) -> &'static str {
        "webster"
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<ControllerDecision> {
        let world = ctx.world;
        if self.plan.is_none() || world.clock >= self.planned_at + WEBSTER_REPLAN {
            self.replan(world);
        }
        let sig = &world.signal;
        if sig.in_yellow {
            return Ok(hold(world));
        }
        let plan = self.plan.as_ref().expect("plan set above");
        let green = plan.greens[sig.active_phase.index()].round().max(sig.min_green as f64) as u32;
        if sig.phase_elapsed >= green {
            Ok(ControllerDecision { target: next_phase(&world.intersection, sig.active_phase), reason: "split" })
        } else {
            Ok(hold(world))
        }
    }
}

/// Upstream minus downstream queue summed over served movements. Departure
/// legs carry no queue in the single-intersection model.
pub fn phase_pressures(world: &WorldState) -> Vec<f64> {
    world
        .intersection
        .phases
        .iter()
        .map(|p| p.movements.iter().map(|m| world.queue_len(*m) as f64).sum())
        .collect()
}

/// Argmax pressure among available phases, lowest phase id on ties.
pub fn max_pressure(world: &WorldState, avail: &AvailablePhases) -> ControllerDecision {
    let pressure = phase_pressures(world);
    let mut best = avail.as_slice()[0];
    for p in avail.iter() {
        if pressure[p.index()] > pressure[best.index()] {
            best = p;
        }
    }
    ControllerDecision { target: best, reason: "pressure" }
}

#[derive(Clone, Debug, Default)]
pub struct MaxPressure;

impl Controller for MaxPressure {
    fn name(&self) -> &'static str {
        "maxpressure"
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<ControllerDecision> {
        Ok(max_pressure(ctx.world, ctx.avail))
    }
}
