//! Deterministic 1 s tick microsimulation of a single signalized
//! intersection.

pub mod signal;
pub mod topology;
pub mod world;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use signal::{RequestOutcome, SignalState, DEFAULT_MIN_GREEN, DEFAULT_YELLOW};
pub use topology::{
    build_intersection, Approach, Intersection, IntersectionParams, Movement, MovementId, Phase, PhaseId, Template,
    TurnType,
};
pub use world::{LogEntry, LogKind, ScenarioEvent, Vehicle, VehicleClass, WorldState};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntersectionSection {
    pub template: Template,
    #[serde(flatten)]
    pub overrides: IntersectionParams,
}

/// Per-movement demand in veh/h. `rates` wins when given; otherwise
/// through/left defaults are applied per approach: north/south is the major
/// road on the 4-leg, west/east on the T-junction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandSection {
    pub rates: Option<Vec<f64>>,
    pub major_through: f64,
    pub major_left: f64,
    pub minor_through: f64,
    pub minor_left: f64,
}

impl Default for DemandSection {
    fn default() -> Self {
        DemandSection { rates: None, major_through: 500.0, major_left: 150.0, minor_through: 300.0, minor_left: 100.0 }
    }
}

impl DemandSection {
    pub fn rates_for(&self, x: &Intersection) -> Result<Vec<f64>> {
        if let Some(r) = &self.rates {
            if r.len() != x.movements.len() {
                return Err(Error::Config(format!(
                    "demand.rates has {} entries, template has {} movements",
                    r.len(),
                    x.movements.len()
                )));
            }
            return Ok(r.clone());
        }
        let major = |a: Approach| match x.template {
            Template::FourLeg => matches!(a, Approach::North | Approach::South),
            Template::TJunction => matches!(a, Approach::West | Approach::East),
        };
        Ok(x.movements
            .iter()
            .map(|m| match (major(m.approach), m.turn) {
                (true, TurnType::Through) => self.major_through,
                (true, _) => self.major_left,
                (false, TurnType::Through) => self.minor_through,
                (false, _) => self.minor_left,
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    /// Episode length in seconds.
    pub duration: u64,
    pub seed: u64,
    pub min_green: u32,
    pub yellow: u32,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection { duration: 3600, seed: 0, min_green: DEFAULT_MIN_GREEN, yellow: DEFAULT_YELLOW }
    }
}

/// Scenario document: `intersection`, `demand`, `events`, `sim`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub intersection: IntersectionSection,
    pub demand: DemandSection,
    pub events: Vec<ScenarioEvent>,
    pub sim: SimSection,
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.sim.seed = seed;
        c
    }

    pub fn intersection(&self) -> Result<Intersection> {
        build_intersection(self.intersection.template, &self.intersection.overrides)
    }

    /// Fresh world at clock 0 for this scenario's seed.
    pub fn build_world(&self) -> Result<WorldState> {
        let x = self.intersection()?;
        let demand = self.demand.rates_for(&x)?;
        WorldState::new(x, &demand, self.events.clone(), self.sim.seed, self.sim.min_green, self.sim.yellow)
    }

    pub fn emergency_count(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, ScenarioEvent::EmergencySpawn { .. })).count()
    }
}

/// `count` emergency spawns at seeded uniform times in `[from, to)` on
/// uniformly chosen movements, sorted by time.
pub fn random_emergency_events(
    intersection: &Intersection,
    count: usize,
    from: u64,
    to: u64,
    seed: u64,
    exclude: &[MovementId],
) -> Vec<ScenarioEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x454d_5653);
    let candidates: Vec<MovementId> =
        intersection.movements.iter().map(|m| m.id).filter(|m| !exclude.contains(m)).collect();
    let mut out: Vec<ScenarioEvent> = (0..count)
        .map(|_| ScenarioEvent::EmergencySpawn {
            movement: candidates[rng.gen_range(0..candidates.len())],
            start_time: rng.gen_range(from..to.max(from + 1)),
        })
        .collect();
    out.sort_by_key(ScenarioEvent::start_time);
    out
}
