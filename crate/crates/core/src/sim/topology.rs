//! Intersection templates: movements, direction-level phases and the
//! movement conflict table.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1-based movement identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MovementId(pub usize);

impl MovementId {
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for MovementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// 1-based phase identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseId(pub usize);

impl PhaseId {
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    North,
    East,
    South,
    West,
}

impl Approach {
    pub fn short(self) -> &'static str {
        match self {
            Approach::North => "N",
            Approach::East => "E",
            Approach::South => "S",
            Approach::West => "W",
        }
    }

    fn opposite(self) -> Approach {
        match self {
            Approach::North => Approach::South,
            Approach::East => Approach::West,
            Approach::South => Approach::North,
            Approach::West => Approach::East,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnType {
    Through = 0,
    Left = 1,
    Right = 2,
}

impl TurnType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            TurnType::Through => "through",
            TurnType::Left => "left",
            TurnType::Right => "right",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub id: MovementId,
    pub approach: Approach,
    pub turn: TurnType,
    pub lane_count: u32,
    /// Meters.
    pub lane_length: f64,
    /// Seconds per discharged vehicle per lane.
    pub sat_headway: f64,
    pub blocked: bool,
}

impl Movement {
    /// Saturation service in vehicles per second across all lanes.
    pub fn service_rate(&self) -> f64 {
        self.lane_count as f64 / self.sat_headway
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.approach.short(), self.turn.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub id: PhaseId,
    pub movements: Vec<MovementId>,
}

impl Phase {
    pub fn serves(&self, m: MovementId) -> bool {
        self.movements.contains(&m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    #[default]
    FourLeg,
    TJunction,
}

/// Geometry overrides applied on top of a template's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntersectionParams {
    pub lane_length: Option<f64>,
    pub sat_headway: Option<f64>,
    pub through_lanes: Option<u32>,
    pub left_lanes: Option<u32>,
}

pub const DEFAULT_LANE_LENGTH: f64 = 200.0;
pub const DEFAULT_SAT_HEADWAY: f64 = 2.0;
const DEFAULT_THROUGH_LANES: u32 = 2;
const DEFAULT_LEFT_LANES: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub template: Template,
    pub movements: Vec<Movement>,
    pub phases: Vec<Phase>,
    pub conflicts: Vec<Vec<bool>>,
}

impl Intersection {
    pub fn movement(&self, id: MovementId) -> Option<&Movement> {
        id.0.checked_sub(1).and_then(|i| self.movements.get(i))
    }

    pub fn phase(&self, id: PhaseId) -> Option<&Phase> {
        id.0.checked_sub(1).and_then(|i| self.phases.get(i))
    }

    pub fn phase_ids(&self) -> impl Iterator<Item = PhaseId> + '_ {
        self.phases.iter().map(|p| p.id)
    }

    /// Camera directions, one per approach, in first-appearance order.
    pub fn approaches(&self) -> Vec<Approach> {
        let mut out = Vec::new();
        for m in &self.movements {
            if !out.contains(&m.approach) {
                out.push(m.approach);
            }
        }
        out
    }

    /// 1-based direction index of an approach.
    pub fn direction_of(&self, approach: Approach) -> usize {
        self.approaches()
            .iter()
            .position(|a| *a == approach)
            .map(|i| i + 1)
            .unwrap_or(0)
    }

    pub fn phases_serving(&self, m: MovementId) -> impl Iterator<Item = PhaseId> + '_ {
        self.phases.iter().filter(move |p| p.serves(m)).map(|p| p.id)
    }

    fn validate(&self) -> Result<()> {
        let m = self.movements.len();
        if self.conflicts.len() != m || self.conflicts.iter().any(|row| row.len() != m) {
            return Err(Error::Config("conflict table shape mismatch".into()));
        }
        for i in 0..m {
            for j in 0..m {
                if self.conflicts[i][j] != self.conflicts[j][i] {
                    return Err(Error::Config(format!("conflict table asymmetric at ({}, {})", i + 1, j + 1)));
                }
            }
        }
        for mv in &self.movements {
            if mv.lane_count < 1 {
                return Err(Error::Config(format!("movement {} has no lanes", mv.id)));
            }
            if !(mv.lane_length > 0.0 && mv.lane_length.is_finite()) {
                return Err(Error::Config(format!("movement {} lane_length must be positive", mv.id)));
            }
            if !(mv.sat_headway > 0.0 && mv.sat_headway.is_finite()) {
                return Err(Error::Config(format!("movement {} sat_headway must be positive", mv.id)));
            }
            if !self.phases.iter().any(|p| p.serves(mv.id)) {
                return Err(Error::Config(format!("movement {} is not served by any phase", mv.id)));
            }
        }
        for p in &self.phases {
            if p.movements.is_empty() {
                return Err(Error::Config(format!("phase {} serves no movement", p.id)));
            }
            for (a, &x) in p.movements.iter().enumerate() {
                for &y in &p.movements[a + 1..] {
                    if self.conflicts[x.index()][y.index()] {
                        return Err(Error::Config(format!(
                            "phase {} grants conflicting movements {x} and {y}",
                            p.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Same-approach movements never conflict and neither do opposing throughs.
fn conflicts_between(a: &Movement, b: &Movement) -> bool {
    if a.id == b.id || a.approach == b.approach {
        return false;
    }
    !(a.turn == TurnType::Through && b.turn == TurnType::Through && a.approach.opposite() == b.approach)
}

pub fn build_intersection(template: Template, params: &IntersectionParams) -> Result<Intersection> {
    let lane_length = params.lane_length.unwrap_or(DEFAULT_LANE_LENGTH);
    let sat_headway = params.sat_headway.unwrap_or(DEFAULT_SAT_HEADWAY);
    let through_lanes = params.through_lanes.unwrap_or(DEFAULT_THROUGH_LANES);
    let left_lanes = params.left_lanes.unwrap_or(DEFAULT_LEFT_LANES);
    if !(lane_length > 0.0) || !lane_length.is_finite() {
        return Err(Error::Config(format!("lane_length must be positive, got {lane_length}")));
    }
    if !(sat_headway > 0.0) || !sat_headway.is_finite() {
        return Err(Error::Config(format!("sat_headway must be positive, got {sat_headway}")));
    }
    if through_lanes == 0 || left_lanes == 0 {
        return Err(Error::Config("lane counts must be at least 1".into()));
    }

    let lanes_for = |turn: TurnType| match turn {
        TurnType::Through => through_lanes,
        _ => left_lanes,
    };

    // (approach, turns) per direction-level phase, in phase order.
    let layout: Vec<(Approach, Vec<TurnType>)> = match template {
        Template::FourLeg => [Approach::North, Approach::East, Approach::South, Approach::West]
            .into_iter()
            .map(|a| (a, vec![TurnType::Through, TurnType::Left]))
            .collect(),
        // West-east main road with a southern stem.
        Template::TJunction => vec![
            (Approach::West, vec![TurnType::Through]),
            (Approach::East, vec![TurnType::Through, TurnType::Left]),
            (Approach::South, vec![TurnType::Left, TurnType::Right]),
        ],
    };

    let mut movements = Vec::new();
    let mut phases = Vec::new();
    for (k, (approach, turns)) in layout.into_iter().enumerate() {
        let mut served = Vec::new();
        for turn in turns {
            let id = MovementId(movements.len() + 1);
            movements.push(Movement {
                id,
                approach,
                turn,
                lane_count: lanes_for(turn),
                lane_length,
                sat_headway,
                blocked: false,
            });
            served.push(id);
        }
        phases.push(Phase { id: PhaseId(k + 1), movements: served });
    }

    let conflicts = movements
        .iter()
        .map(|a| movements.iter().map(|b| conflicts_between(a, b)).collect())
        .collect();

    let intersection = Intersection { template, movements, phases, conflicts };
    intersection.validate()?;
    Ok(intersection)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourleg_has_four_phases_and_eight_movements() {
        let x = build_intersection(Template::FourLeg, &IntersectionParams::default()).unwrap();
        assert_eq!(x.phases.len(), 4);
        assert_eq!(x.movements.len(), 8);
        assert_eq!(x.movements.iter().filter(|m| m.turn == TurnType::Through).count(), 4);
        assert_eq!(x.movements.iter().filter(|m| m.turn == TurnType::Left).count(), 4);
        assert_eq!(x.approaches().len(), 4);
    }

    #[test]
    fn tjunction_has_three_phases() {
        let x = build_intersection(Template::TJunction, &IntersectionParams::default()).unwrap();
        assert_eq!(x.phases.len(), 3);
        assert_eq!(x.approaches().len(), 3);
    }

    #[test]
    fn zero_lane_length_is_rejected() {
        let params = IntersectionParams { lane_length: Some(0.0), ..Default::default() };
        assert!(matches!(build_intersection(Template::FourLeg, &params), Err(Error::Config(_))));
        let params = IntersectionParams { sat_headway: Some(-1.0), ..Default::default() };
        assert!(matches!(build_intersection(Template::TJunction, &params), Err(Error::Config(_))));
    }

    #[test]
    fn conflict_table_is_symmetric_and_phases_are_conflict_free() {
        for t in [Template::FourLeg, Template::TJunction] {
            let x = build_intersection(t, &IntersectionParams::default()).unwrap();
            let m = x.movements.len();
            for i in 0..m {
                assert!(!x.conflicts[i][i]);
                for j in 0..m {
                    assert_eq!(x.conflicts[i][j], x.conflicts[j][i]);
                }
            }
            for p in &x.phases {
                for a in &p.movements {
                    for b in &p.movements {
                        assert!(!x.conflicts[a.index()][b.index()]);
                    }
                }
            }
        }
    }

    #[test]
    fn crossing_streams_conflict() {
        let x = build_intersection(Template::FourLeg, &IntersectionParams::default()).unwrap();
        // N through vs E through
        assert!(x.conflicts[0][2]);
        // N through vs S through run side by side
        assert!(!x.conflicts[0][4]);
    }
}
