//! Textual scene context: a ground-truth perception stub with injectable
//! noise, a deterministic sensor summary, static traffic rules and the
//! prompt context handed to the refinement evaluator.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensing::{lane_occupancies, occupancy_summary, AvailablePhases, SensorState};
use crate::sim::{Intersection, MovementId, PhaseId, SignalState, VehicleClass, WorldState};

pub const NO_EVENTS: &str = "No abnormal visual events observed.";
pub const DEFAULT_HEAVY_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueKind {
    EmergencyVehicle,
    Barrier,
    HeavyQueue,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualCue {
    /// 1-based camera direction, one per approach.
    pub direction: usize,
    pub kind: CueKind,
    pub movement: MovementId,
    pub text: String,
    pub noise_flags: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionNoise {
    pub miscount_prob: f64,
    pub miss_prob: f64,
    /// Lane occupancy above which a heavy-queue cue is emitted.
    pub heavy_threshold: f64,
}

impl Default for PerceptionNoise {
    fn default() -> Self {
        PerceptionNoise { miscount_prob: 0.0, miss_prob: 0.0, heavy_threshold: DEFAULT_HEAVY_THRESHOLD }
    }
}

impl PerceptionNoise {
    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(self.miscount_prob) || !unit(self.miss_prob) {
            return Err(Error::Config("perception noise probabilities must lie in [0, 1]".into()));
        }
        if !(self.heavy_threshold >= 0.0) {
            return Err(Error::Config("heavy_threshold must be non-negative".into()));
        }
        Ok(())
    }
}

struct RawCue {
    direction: usize,
    kind: CueKind,
    movement: MovementId,
    /// Numbers rendered into the text; subject to miscounting.
    counts: Vec<u64>,
}

fn render(x: &Intersection, cue: &RawCue) -> String {
    let mv = x.movement(cue.movement).expect("cue on a known movement");
    let head = format!("Direction {} ({}): ", cue.direction, mv.approach.short());
    let body = match cue.kind {
        CueKind::EmergencyVehicle => format!(
            "emergency vehicle waiting on movement {} ({}), queue position {} of {} vehicles.",
            mv.id,
            mv.label(),
            cue.counts[0],
            cue.counts[1]
        ),
        CueKind::Barrier => format!("barrier blocking movement {} ({}).", mv.id, mv.label()),
        CueKind::HeavyQueue => {
            format!("heavy queue on movement {} ({}), {} vehicles waiting.", mv.id, mv.label(), cue.counts[0])
        }
    };
    head + &body
}

/// Ground-truth cues, in movement order: one per queued emergency vehicle,
/// one per blocked movement, one per movement whose busiest lane exceeds
/// the heavy threshold. Every enumerated cue consumes exactly three draws.
pub fn perceive(world: &WorldState, noise: &PerceptionNoise, rng: &mut impl Rng) -> Result<Vec<VisualCue>> {
    noise.validate()?;
    let x = &world.intersection;
    let mut raw = Vec::new();
    for mv in &x.movements {
        let direction = x.direction_of(mv.approach);
        let queue = &world.queues[mv.id.index()];
        let n = queue.len() as u64;
        for (pos, v) in queue.iter().enumerate() {
            if v.class == VehicleClass::Emergency {
                raw.push(RawCue {
                    direction,
                    kind: CueKind::EmergencyVehicle,
                    movement: mv.id,
                    counts: vec![pos as u64 + 1, n],
                });
            }
        }
        if mv.blocked {
            raw.push(RawCue { direction, kind: CueKind::Barrier, movement: mv.id, counts: vec![] });
        }
        let (occ_max, _) = occupancy_summary(&lane_occupancies(queue.len(), mv.lane_count, mv.lane_length));
        if occ_max > noise.heavy_threshold {
            raw.push(RawCue { direction, kind: CueKind::HeavyQueue, movement: mv.id, counts: vec![n] });
        }
    }

    let mut cues = Vec::with_capacity(raw.len());
    for mut cue in raw {
        let miss: f64 = rng.gen();
        let miscount: f64 = rng.gen();
        let up: bool = rng.gen();
        if miss < noise.miss_prob {
            continue;
        }
        let mut noise_flags = Vec::new();
        if miscount < noise.miscount_prob && !cue.counts.is_empty() {
            for c in &mut cue.counts {
                *c = if up { *c + 1 } else { c.saturating_sub(1).max(1) };
            }
            noise_flags.push("miscount".to_string());
        }
        cues.push(VisualCue {
            direction: cue.direction,
            kind: cue.kind,
            movement: cue.movement,
            text: render(x, &cue),
            noise_flags,
        });
    }
    Ok(cues)
}

/// Cue sentences ordered by direction then kind, one per line.
pub fn aggregate(cues: &[VisualCue]) -> String {
    if cues.is_empty() {
        return NO_EVENTS.to_string();
    }
    let mut sorted: Vec<&VisualCue> = cues.iter().collect();
    sorted.sort_by_key(|c| (c.direction, c.kind));
    sorted.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join("\n")
}

pub fn summarize(j: &SensorState, signal: &SignalState) -> String {
    let mut out = String::new();
    if signal.in_yellow {
        let _ = write!(
            out,
            "Active phase {} in yellow, {} s to phase {}.",
            signal.active_phase,
            signal.yellow_remaining,
            signal.next_green()
        );
    } else {
        let _ = write!(out, "Active phase {}, green for {} s.", signal.active_phase, signal.phase_elapsed);
    }
    for (i, f) in j.features.iter().enumerate() {
        let _ = write!(
            out,
            "\nMovement {}: occupancy {:.2} (max {:.2}) on {} lanes, flow {:.2} veh/s, {}, min-green {}.",
            i + 1,
            f.occ_mean,
            f.occ_max,
            f.lane_count,
            f.flow,
            if f.is_green > 0.5 { "GREEN" } else { "RED" },
            if f.min_green_ok > 0.5 { "met" } else { "pending" }
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub omega_s: String,
    pub omega_v: String,
    pub cues: Vec<VisualCue>,
    pub source_clock: u64,
}

pub fn describe(
    world: &WorldState,
    j: &SensorState,
    noise: &PerceptionNoise,
    rng: &mut impl Rng,
) -> Result<SceneDescription> {
    let cues = perceive(world, noise, rng)?;
    Ok(SceneDescription {
        omega_s: summarize(j, &world.signal),
        omega_v: aggregate(&cues),
        cues,
        source_clock: world.clock,
    })
}

const MOVEMENT_PREFIX: &str = "Movement ";
const PHASE_PREFIX: &str = "Phase ";
const CONSTRAINT_PREFIX: &str = "Constraint: ";
const FEASIBILITY_PREFIX: &str = "Feasibility: ";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficRules {
    pub movements: Vec<String>,
    pub phases: Vec<String>,
    pub constraints: Vec<String>,
    pub feasibility: Vec<String>,
}

impl TrafficRules {
    pub fn from_intersection(x: &Intersection, min_green: u32, yellow: u32) -> Self {
        let movements = x
            .movements
            .iter()
            .map(|m| {
                format!(
                    "{MOVEMENT_PREFIX}{}: {}, {} lanes, {:.1} s saturation headway.",
                    m.id,
                    m.label(),
                    m.lane_count,
                    m.sat_headway
                )
            })
            .collect();
        let phases = x
            .phases
            .iter()
            .map(|p| {
                let ms: Vec<String> = p.movements.iter().map(|m| m.to_string()).collect();
                format!("{PHASE_PREFIX}{} serves movements {}.", p.id, ms.join(", "))
            })
            .collect();
        TrafficRules {
            movements,
            phases,
            constraints: vec![
                format!("{CONSTRAINT_PREFIX}a green phase lasts at least {min_green} s."),
                format!("{CONSTRAINT_PREFIX}every phase change inserts {yellow} s of yellow."),
            ],
            feasibility: vec![format!("{FEASIBILITY_PREFIX}only phases listed as available may be selected.")],
        }
    }

    pub fn lines(&self) -> Vec<String> {
        [&self.movements, &self.phases, &self.constraints, &self.feasibility].into_iter().flatten().cloned().collect()
    }

    pub fn from_lines(lines: &[String]) -> Result<Self> {
        let mut r = TrafficRules { movements: vec![], phases: vec![], constraints: vec![], feasibility: vec![] };
        for l in lines {
            let block = if l.starts_with(MOVEMENT_PREFIX) {
                &mut r.movements
            } else if l.starts_with(PHASE_PREFIX) {
                &mut r.phases
            } else if l.starts_with(CONSTRAINT_PREFIX) {
                &mut r.constraints
            } else if l.starts_with(FEASIBILITY_PREFIX) {
                &mut r.feasibility
            } else {
                return Err(Error::Contract(format!("unrecognized rule line: {l}")));
            };
            block.push(l.clone());
        }
        Ok(r)
    }
}

pub const FORMAT_COMPONENT: &str = "[format] Reply with one JSON object {\"action\": <phase id>, \"explanation\": <text>}. \
The action must be one of the available phases.";
pub const CHAIN_COMPONENT: &str = "[chain] Compare the RL proposal with the reported visual cues, check each option \
against the available phases, then decide.";
pub const GUIDELINES_COMPONENT: &str = "[guidelines] G1: give green to an available phase serving a reported \
emergency vehicle. G2: if the proposed phase serves a movement behind a barrier, choose the available phase with the \
largest unblocked occupancy. G3: otherwise keep the proposal.";

/// Optional prompt components. The output-format block is always present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub chain: bool,
    pub guidelines: bool,
}

impl Components {
    pub const FORMAT_ONLY: Components = Components { chain: false, guidelines: false };
    pub const GUIDELINES: Components = Components { chain: false, guidelines: true };
    pub const FULL: Components = Components { chain: true, guidelines: true };

    /// Enabled blocks in serialization order.
    pub fn blocks(&self) -> Vec<String> {
        let mut out = vec![FORMAT_COMPONENT.to_string()];
        if self.chain {
            out.push(CHAIN_COMPONENT.to_string());
        }
        if self.guidelines {
            out.push(GUIDELINES_COMPONENT.to_string());
        }
        out
    }

    pub fn from_blocks(blocks: &[String]) -> Result<Self> {
        if blocks.first().map(String::as_str) != Some(FORMAT_COMPONENT) {
            return Err(Error::Contract("the output-format component must come first".into()));
        }
        let c = Components {
            chain: blocks.iter().any(|b| b == CHAIN_COMPONENT),
            guidelines: blocks.iter().any(|b| b == GUIDELINES_COMPONENT),
        };
        if c.blocks() != blocks {
            return Err(Error::Contract("unknown, repeated or misordered prompt component".into()));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptContext {
    pub omega_s: String,
    pub omega_v: String,
    pub rl_action: PhaseId,
    pub available: AvailablePhases,
    pub rules: TrafficRules,
    pub components: Components,
}

/// Request body of the evaluator protocol. Field order is the key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireDocument {
    pub omega_s: String,
    pub omega_v: String,
    pub rl_action: usize,
    pub available_phases: Vec<usize>,
    pub rules: Vec<String>,
    pub components: Vec<String>,
}

pub fn assemble(
    omega_s: String,
    omega_v: String,
    rl_action: PhaseId,
    available: AvailablePhases,
    rules: TrafficRules,
    components: Components,
) -> Result<PromptContext> {
    if !available.contains(rl_action) {
        return Err(Error::Contract(format!("RL action {rl_action} is not in the available phase set")));
    }
    Ok(PromptContext { omega_s, omega_v, rl_action, available, rules, components })
}

impl PromptContext {
    pub fn to_wire(&self) -> WireDocument {
        WireDocument {
            omega_s: self.omega_s.clone(),
            omega_v: self.omega_v.clone(),
            rl_action: self.rl_action.0,
            available_phases: self.available.iter().map(|p| p.0).collect(),
            rules: self.rules.lines(),
            components: self.components.blocks(),
        }
    }

    pub fn from_wire(doc: &WireDocument) -> Result<Self> {
        if doc.available_phases.contains(&0) {
            return Err(Error::Contract("phase ids are 1-based".into()));
        }
        let available = AvailablePhases::new(doc.available_phases.iter().map(|p| PhaseId(*p)).collect())
            .map_err(|e| Error::Contract(e.to_string()))?;
        assemble(
            doc.omega_s.clone(),
            doc.omega_v.clone(),
            PhaseId(doc.rl_action),
            available,
            TrafficRules::from_lines(&doc.rules)?,
            Components::from_blocks(&doc.components)?,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_wire()).expect("wire document serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_wire(&serde_json::from_str(s)?)
    }
}
