//! Point-queue world state and the 1 s tick.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::signal::{RequestOutcome, SignalState};
use super::topology::{Intersection, MovementId, PhaseId};
use crate::error::{Error, Result};

/// Ticks of per-movement arrival/discharge counts kept for flow estimates.
pub const HISTORY_LEN: usize = 600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Regular,
    Emergency,
}

impl VehicleClass {
    pub fn name(self) -> &'static str {
        match self {
            VehicleClass::Regular => "regular",
            VehicleClass::Emergency => "emergency",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: u64,
    pub class: VehicleClass,
    pub movement: MovementId,
    pub entry_time: u64,
    /// Accumulated stationary seconds.
    pub waiting: u64,
    pub exit_time: Option<u64>,
}

impl Vehicle {
    pub fn travel_time(&self) -> Option<u64> {
        self.exit_time.map(|t| t - self.entry_time)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioEvent {
    EmergencySpawn { movement: MovementId, start_time: u64 },
    Regulation { movement: MovementId, start_time: u64, duration: u64 },
}

impl ScenarioEvent {
    pub fn movement(&self) -> MovementId {
        match self {
            ScenarioEvent::EmergencySpawn { movement, .. } | ScenarioEvent::Regulation { movement, .. } => *movement,
        }
    }

    pub fn start_time(&self) -> u64 {
        match self {
            ScenarioEvent::EmergencySpawn { start_time, .. } | ScenarioEvent::Regulation { start_time, .. } => {
                *start_time
            }
        }
    }

    fn active_regulation_at(&self, clock: u64) -> Option<MovementId> {
        match *self {
            ScenarioEvent::Regulation { movement, start_time, duration } if clock >= start_time && clock < start_time + duration => {
                Some(movement)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Green,
    Yellow,
    Reject,
    Arrive,
    EmvSpawn,
    Depart,
    Block,
    Unblock,
}

impl LogKind {
    pub fn name(self) -> &'static str {
        match self {
            LogKind::Green => "green",
            LogKind::Yellow => "yellow",
            LogKind::Reject => "reject",
            LogKind::Arrive => "arrive",
            LogKind::EmvSpawn => "emv_spawn",
            LogKind::Depart => "depart",
            LogKind::Block => "block",
            LogKind::Unblock => "unblock",
        }
    }
}

/// One state transition. Renders as `clock<TAB>kind<TAB>payload`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub clock: u64,
    pub kind: LogKind,
    pub payload: String,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.clock, self.kind.name(), self.payload)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickCounts {
    pub arrivals: Vec<u32>,
    pub discharges: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldState {
    pub clock: u64,
    pub intersection: Intersection,
    pub signal: SignalState,
    pub queues: Vec<VecDeque<Vehicle>>,
    pub completed: Vec<Vehicle>,
    pub events: Vec<ScenarioEvent>,
    /// Bernoulli arrival probability per movement per second.
    pub arrival_prob: Vec<f64>,
    pub entered: u64,
    pub log: Vec<LogEntry>,
    /// Most recent tick last.
    pub history: VecDeque<TickCounts>,
    service_credit: Vec<f64>,
    next_vehicle_id: u64,
    #[serde(skip, default = "default_rng")]
    rng: ChaCha8Rng,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl WorldState {
    /// `demand` is veh/h per movement in id order.
    pub fn new(
        intersection: Intersection,
        demand: &[f64],
        events: Vec<ScenarioEvent>,
        seed: u64,
        min_green: u32,
        yellow_len: u32,
    ) -> Result<Self> {
        let m = intersection.movements.len();
        if demand.len() != m {
            return Err(Error::Config(format!("demand has {} entries, intersection has {m} movements", demand.len())));
        }
        if let Some(d) = demand.iter().find(|d| !(d.is_finite() && **d >= 0.0 && **d <= 3600.0)) {
            return Err(Error::Config(format!("demand {d} veh/h outside [0, 3600]")));
        }
        if yellow_len == 0 {
            return Err(Error::Config("yellow length must be at least 1 s".into()));
        }
        for ev in &events {
            if intersection.movement(ev.movement()).is_none() {
                return Err(Error::Config(format!("event references unknown movement {}", ev.movement())));
            }
            if let ScenarioEvent::Regulation { duration: 0, .. } = ev {
                return Err(Error::Config("regulation duration must be positive".into()));
            }
        }
        let first = intersection.phases.first().map(|p| p.id).ok_or_else(|| Error::Config("no phases".into()))?;
        let mut world = WorldState {
            clock: 0,
            signal: SignalState::new(first, min_green, yellow_len),
            queues: vec![VecDeque::new(); m],
            completed: Vec::new(),
            events,
            arrival_prob: demand.iter().map(|d| d / 3600.0).collect(),
            entered: 0,
            log: Vec::new(),
            history: VecDeque::with_capacity(HISTORY_LEN),
            service_credit: vec![0.0; m],
            next_vehicle_id: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            intersection,
        };
        world.push_log(LogKind::Green, format!("phase={}", first));
        world.apply_events();
        Ok(world)
    }

    fn push_log(&mut self, kind: LogKind, payload: String) {
        self.log.push(LogEntry { clock: self.clock, kind, payload });
    }

    fn spawn(&mut self, movement: MovementId, class: VehicleClass) -> u64 {
        let id = self.next_vehicle_id;
        self.next_vehicle_id += 1;
        self.entered += 1;
        self.queues[movement.index()].push_back(Vehicle {
            id,
            class,
            movement,
            entry_time: self.clock,
            waiting: 0,
            exit_time: None,
        });
        id
    }

    pub fn num_phases(&self) -> usize {
        self.intersection.phases.len()
    }

    pub fn queue_len(&self, m: MovementId) -> usize {
        self.queues[m.index()].len()
    }

    pub fn in_queue(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn vehicles_present(&self) -> impl Iterator<Item = &Vehicle> {
        self.queues.iter().flatten()
    }

    /// Movement ids blocked by an active regulation.
    pub fn blocked_movements(&self) -> Vec<MovementId> {
        self.intersection.movements.iter().filter(|m| m.blocked).map(|m| m.id).collect()
    }

    pub fn movement_is_green(&self, m: MovementId) -> bool {
        self.intersection
            .phase(self.signal.active_phase)
            .map(|p| p.serves(m) && !self.signal.in_yellow)
            .unwrap_or(false)
    }

    /// Ask the signal to move to `target`. Returns what happened; unknown
    /// phases are a domain error.
    pub fn request_phase(&mut self, target: PhaseId) -> Result<RequestOutcome> {
        if self.intersection.phase(target).is_none() {
            return Err(Error::Domain(format!("unknown phase {target}")));
        }
        let sig = &mut self.signal;
        if sig.in_yellow {
            return Ok(if sig.pending_phase == Some(target) {
                RequestOutcome::NoOp
            } else {
                RequestOutcome::IgnoredYellow
            });
        }
        if target == sig.active_phase {
            return Ok(RequestOutcome::NoOp);
        }
        if !sig.min_green_ok() {
            let payload = format!("from={} to={} elapsed={}", sig.active_phase, target, sig.phase_elapsed);
            self.push_log(LogKind::Reject, payload);
            return Ok(RequestOutcome::RejectedMinGreen);
        }
        sig.in_yellow = true;
        sig.yellow_remaining = sig.yellow_len;
        sig.pending_phase = Some(target);
        let payload = format!("from={} to={} green={}", sig.active_phase, target, sig.phase_elapsed);
        self.push_log(LogKind::Yellow, payload);
        Ok(RequestOutcome::Accepted)
    }

    /// Fire scenario events due at the current clock: emergency spawns
    /// starting now and regulation block/unblock transitions.
    pub fn apply_events(&mut self) {
        let clock = self.clock;
        let spawns: Vec<MovementId> = self
            .events
            .iter()
            .filter_map(|ev| match *ev {
                ScenarioEvent::EmergencySpawn { movement, start_time } if start_time == clock => Some(movement),
                _ => None,
            })
            .collect();
        for movement in spawns {
            let id = self.spawn(movement, VehicleClass::Emergency);
            let pos = self.queue_len(movement);
            self.push_log(LogKind::EmvSpawn, format!("veh={id} mov={movement} pos={pos}"));
        }

        let m = self.intersection.movements.len();
        let mut blocked = vec![false; m];
        for ev in &self.events {
            if let Some(mv) = ev.active_regulation_at(clock) {
                blocked[mv.index()] = true;
            }
        }
        for (i, now) in blocked.into_iter().enumerate() {
            let was = self.intersection.movements[i].blocked;
            if was != now {
                self.intersection.movements[i].blocked = now;
                let kind = if now { LogKind::Block } else { LogKind::Unblock };
                self.push_log(kind, format!("mov={}", i + 1));
            }
        }
    }

    /// Advance one second. Returns the vehicles that discharged this tick.
    pub fn step(&mut self) -> Vec<Vehicle> {
        self.clock += 1;
        self.apply_events();

        let m = self.intersection.movements.len();
        let mut counts = TickCounts { arrivals: vec![0; m], discharges: vec![0; m] };

        for i in 0..m {
            // One draw per movement per tick keeps the stream aligned across demand configs.
            let u: f64 = self.rng.gen();
            if u < self.arrival_prob[i] {
                let id = self.spawn(MovementId(i + 1), VehicleClass::Regular);
                counts.arrivals[i] += 1;
                self.push_log(LogKind::Arrive, format!("veh={id} mov={}", i + 1));
            }
        }

        let mut departures = Vec::new();
        for i in 0..m {
            let mv = &self.intersection.movements[i];
            let green = self.movement_is_green(mv.id);
            if !green || mv.blocked {
                self.service_credit[i] = 0.0;
                continue;
            }
            let rate = mv.service_rate();
            self.service_credit[i] += rate;
            let n = (self.service_credit[i].floor() as usize).min(self.queues[i].len());
            self.service_credit[i] -= n as f64;
            for _ in 0..n {
                let mut v = self.queues[i].pop_front().expect("queue length checked");
                v.exit_time = Some(self.clock);
                departures.push(v);
            }
            counts.discharges[i] = n as u32;
            if self.queues[i].is_empty() {
                // Unused capacity cannot be banked beyond one tick.
                self.service_credit[i] = self.service_credit[i].min(rate);
            }
        }

        for v in self.queues.iter_mut().flatten() {
            v.waiting += 1;
        }

        for v in &departures {
            let payload = format!(
                "veh={} mov={} class={} entry={} wait={}",
                v.id,
                v.movement,
                v.class.name(),
                v.entry_time,
                v.waiting
            );
            self.push_log(LogKind::Depart, payload);
        }
        self.completed.extend(departures.iter().cloned());

        let sig = &mut self.signal;
        if sig.in_yellow {
            sig.yellow_remaining -= 1;
            if sig.yellow_remaining == 0 {
                sig.active_phase = sig.pending_phase.take().expect("pending phase set during yellow");
                sig.in_yellow = false;
                sig.phase_elapsed = 0;
                let payload = format!("phase={}", sig.active_phase);
                self.push_log(LogKind::Green, payload);
            }
        } else {
            sig.phase_elapsed += 1;
        }

        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(counts);

        debug_assert_eq!(self.entered as usize, self.completed.len() + self.in_queue());
        departures
    }

    /// Discharges per movement summed over the trailing `window` ticks.
    pub fn recent_discharges(&self, window: usize) -> Vec<u32> {
        self.sum_history(window, |c| &c.discharges)
    }

    /// Arrivals per movement summed over the trailing `window` ticks.
    pub fn recent_arrivals(&self, window: usize) -> Vec<u32> {
        self.sum_history(window, |c| &c.arrivals)
    }

    fn sum_history(&self, window: usize, field: impl Fn(&TickCounts) -> &Vec<u32>) -> Vec<u32> {
        let mut out = vec![0; self.intersection.movements.len()];
        for c in self.history.iter().rev().take(window) {
            for (o, x) in out.iter_mut().zip(field(c)) {
                *o += x;
            }
        }
        out
    }

    pub fn log_lines(&self) -> Vec<String> {
        self.log.iter().map(ToString::to_string).collect()
    }

    /// Test hook: place a vehicle directly in a queue.
    #[doc(hidden)]
    pub fn inject_vehicle(&mut self, movement: MovementId, class: VehicleClass) -> u64 {
        self.spawn(movement, class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::topology::{build_intersection, IntersectionParams, Template};

    fn world_with(params: IntersectionParams, demand: f64, events: Vec<ScenarioEvent>) -> WorldState {
        let x = build_intersection(Template::FourLeg, &params).unwrap();
        let d = vec![demand; x.movements.len()];
        WorldState::new(x, &d, events, 1, 10, 3).unwrap()
    }

    #[test]
    fn request_same_phase_is_noop() {
        let mut w = world_with(Default::default(), 0.0, vec![]);
        for _ in 0..12 {
            w.step();
        }
        let before = w.signal.clone();
        assert_eq!(w.request_phase(PhaseId(1)).unwrap(), RequestOutcome::NoOp);
        assert_eq!(w.signal, before);
    }

    #[test]
    fn request_after_min_green_starts_yellow() {
        let mut w = world_with(Default::default(), 0.0, vec![]);
        for _ in 0..12 {
            w.step();
        }
        assert_eq!(w.signal.phase_elapsed, 12);
        assert_eq!(w.request_phase(PhaseId(3)).unwrap(), RequestOutcome::Accepted);
        assert!(w.signal.in_yellow);
        assert_eq!(w.signal.yellow_remaining, 3);
        assert_eq!(w.signal.pending_phase, Some(PhaseId(3)));
        // step trace: 2, 1, then phase 3 goes green
        w.step();
        assert_eq!(w.signal.yellow_remaining, 2);
        w.step();
        assert_eq!(w.signal.yellow_remaining, 1);
        w.step();
        assert!(!w.signal.in_yellow);
        assert_eq!(w.signal.active_phase, PhaseId(3));
        assert_eq!(w.signal.phase_elapsed, 0);
        assert_eq!(w.signal.pending_phase, None);
    }

    #[test]
    fn request_before_min_green_is_rejected() {
        let mut w = world_with(Default::default(), 0.0, vec![]);
        for _ in 0..4 {
            w.step();
        }
        let before = w.signal.clone();
        let out = w.request_phase(PhaseId(2)).unwrap();
        assert!(out.rejected());
        assert_eq!(w.signal, before);
    }

    #[test]
    fn request_during_yellow_is_ignored() {
        let mut w = world_with(Default::default(), 0.0, vec![]);
        for _ in 0..10 {
            w.step();
        }
        w.request_phase(PhaseId(2)).unwrap();
        assert_eq!(w.request_phase(PhaseId(4)).unwrap(), RequestOutcome::IgnoredYellow);
        assert_eq!(w.signal.pending_phase, Some(PhaseId(2)));
    }

    #[test]
    fn unknown_phase_is_domain_error() {
        let mut w = world_with(Default::default(), 0.0, vec![]);
        assert!(matches!(w.request_phase(PhaseId(9)), Err(Error::Domain(_))));
        assert!(matches!(w.request_phase(PhaseId(0)), Err(Error::Domain(_))));
    }

    #[test]
    fn red_queue_does_not_move_and_accumulates_waiting() {
        let mut w = world_with(Default::default(), 0.0, vec![]);
        // movement 3 (E through) is red under phase 1
        for _ in 0..3 {
            w.inject_vehicle(MovementId(3), VehicleClass::Regular);
        }
        w.step();
        assert_eq!(w.queue_len(MovementId(3)), 3);
        assert!(w.queues[2].iter().all(|v| v.waiting == 1));
    }

    #[test]
    fn one_lane_two_second_headway_clears_three_in_six_seconds() {
        let params = IntersectionParams { through_lanes: Some(1), sat_headway: Some(2.0), ..Default::default() };
        let mut w = world_with(params, 0.0, vec![]);
        for _ in 0..3 {
            w.inject_vehicle(MovementId(1), VehicleClass::Regular);
        }
        let mut exits = Vec::new();
        for _ in 0..6 {
            exits.extend(w.step().into_iter().map(|v| v.exit_time.unwrap()));
        }
        assert_eq!(exits, vec![2, 4, 6]);
        assert_eq!(w.queue_len(MovementId(1)), 0);
    }

    #[test]
    fn blocked_green_movement_discharges_nothing() {
        let events = vec![ScenarioEvent::Regulation { movement: MovementId(1), start_time: 0, duration: 50 }];
        let mut w = world_with(Default::default(), 0.0, events);
        for _ in 0..5 {
            w.inject_vehicle(MovementId(1), VehicleClass::Regular);
        }
        for _ in 0..10 {
            assert!(w.step().is_empty());
        }
        assert_eq!(w.queue_len(MovementId(1)), 5);
    }

    #[test]
    fn regulation_blocks_exactly_its_interval() {
        let events = vec![ScenarioEvent::Regulation { movement: MovementId(1), start_time: 100, duration: 50 }];
        let mut w = world_with(Default::default(), 0.0, events);
        while w.clock < 200 {
            w.step();
            let blocked = w.intersection.movements[0].blocked;
            assert_eq!(blocked, (100..150).contains(&w.clock), "clock {}", w.clock);
        }
    }

    #[test]
    fn same_tick_emergency_spawns_append_in_id_order() {
        let events = vec![
            ScenarioEvent::EmergencySpawn { movement: MovementId(4), start_time: 5 },
            ScenarioEvent::EmergencySpawn { movement: MovementId(4), start_time: 5 },
        ];
        let mut w = world_with(Default::default(), 0.0, events);
        for _ in 0..5 {
            w.step();
        }
        let q: Vec<_> = w.queues[3].iter().map(|v| (v.id, v.class)).collect();
        assert_eq!(q, vec![(0, VehicleClass::Emergency), (1, VehicleClass::Emergency)]);
    }

    #[test]
    fn no_events_leaves_world_unchanged() {
        let mut w = world_with(Default::default(), 0.0, vec![]);
        let before = (w.log.clone(), w.entered, w.intersection.clone());
        w.apply_events();
        assert_eq!((w.log.clone(), w.entered, w.intersection.clone()), before);
    }

    #[test]
    fn unknown_event_movement_is_config_error() {
        let x = build_intersection(Template::FourLeg, &Default::default()).unwrap();
        let ev = vec![ScenarioEvent::EmergencySpawn { movement: MovementId(42), start_time: 0 }];
        assert!(matches!(WorldState::new(x, &[0.0; 8], ev, 0, 10, 3), Err(Error::Config(_))));
    }
}
