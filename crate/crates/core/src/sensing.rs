//! Movement-level sensor observations, the K-frame observation window and
//! the available phase set.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{PhaseId, WorldState};

/// Feature columns per movement.
pub const FEATURE_DIM: usize = 7;
/// 5 m vehicle plus 2.5 m standstill headway.
pub const EFFECTIVE_VEHICLE_LENGTH: f64 = 7.5;
pub const DEFAULT_WINDOW_K: usize = 5;
pub const DEFAULT_FLOW_WINDOW: u64 = 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MovementFeatures {
    /// Discharged veh/s over the measurement window.
    pub flow: f64,
    pub occ_max: f64,
    pub occ_mean: f64,
    pub turn_type: f64,
    pub lane_count: f64,
    pub is_green: f64,
    pub min_green_ok: f64,
}

impl MovementFeatures {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        [self.flow, self.occ_max, self.occ_mean, self.turn_type, self.lane_count, self.is_green, self.min_green_ok]
    }

    pub fn from_array(a: [f64; FEATURE_DIM]) -> Self {
        MovementFeatures {
            flow: a[0],
            occ_max: a[1],
            occ_mean: a[2],
            turn_type: a[3],
            lane_count: a[4],
            is_green: a[5],
            min_green_ok: a[6],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.flow >= 0.0
            && 0.0 <= self.occ_mean
            && self.occ_mean <= self.occ_max
            && self.occ_max <= 1.0
            && self.to_array().iter().all(|x| x.is_finite())
    }
}

/// One M x 7 observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorState {
    pub features: Vec<MovementFeatures>,
    pub clock: u64,
}

impl SensorState {
    pub fn zeros(m: usize) -> Self {
        SensorState { features: vec![MovementFeatures::default(); m], clock: 0 }
    }

    pub fn rows(&self) -> usize {
        self.features.len()
    }

    /// Row-major flat record, 7 columns.
    pub fn to_flat(&self) -> Vec<f64> {
        self.features.iter().flat_map(|f| f.to_array()).collect()
    }

    pub fn from_flat(flat: &[f64], clock: u64) -> Result<Self> {
        if flat.len() % FEATURE_DIM != 0 {
            return Err(Error::Domain(format!("flat record length {} is not a multiple of 7", flat.len())));
        }
        let features = flat
            .chunks_exact(FEATURE_DIM)
            .map(|c| MovementFeatures::from_array(c.try_into().expect("chunk of 7")))
            .collect();
        Ok(SensorState { features, clock })
    }
}

/// Per-lane occupancy ratios for a movement queue spread round-robin over
/// its lanes.
pub fn lane_occupancies(queued: usize, lane_count: u32, lane_length: f64) -> Vec<f64> {
    let lanes = lane_count.max(1) as usize;
    (0..lanes)
        .map(|j| {
            let n = queued / lanes + usize::from(j < queued % lanes);
            (n as f64 * EFFECTIVE_VEHICLE_LENGTH / lane_length).min(1.0)
        })
        .collect()
}

/// (max, mean) over per-lane occupancy ratios.
pub fn occupancy_summary(occ: &[f64]) -> (f64, f64) {
    if occ.is_empty() {
        return (0.0, 0.0);
    }
    let max = occ.iter().cloned().fold(0.0, f64::max);
    let mean = occ.iter().sum::<f64>() / occ.len() as f64;
    (max, mean.min(max))
}

pub fn build_sensor_state(world: &WorldState, window_len: u64) -> SensorState {
    let window = window_len.max(1);
    let discharges = world.recent_discharges(window as usize);
    let min_green_ok = if world.signal.min_green_ok() { 1.0 } else { 0.0 };
    let features = world
        .intersection
        .movements
        .iter()
        .map(|mv| {
            let occ = lane_occupancies(world.queue_len(mv.id), mv.lane_count, mv.lane_length);
            let (occ_max, occ_mean) = occupancy_summary(&occ);
            MovementFeatures {
                flow: discharges[mv.id.index()] as f64 / window as f64,
                occ_max,
                occ_mean,
                turn_type: mv.turn.code() as f64,
                lane_count: mv.lane_count as f64,
                is_green: if world.movement_is_green(mv.id) { 1.0 } else { 0.0 },
                min_green_ok,
            }
        })
        .collect();
    SensorState { features, clock: world.clock }
}

/// The last K observations, oldest first, zero-filled before warm-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    k: usize,
    m: usize,
    frames: VecDeque<SensorState>,
}

impl ObservationWindow {
    pub fn new(k: usize, m: usize) -> Self {
        let k = k.max(1);
        ObservationWindow { k, m, frames: (0..k).map(|_| SensorState::zeros(m)).collect() }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn movements(&self) -> usize {
        self.m
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &SensorState> {
        self.frames.iter()
    }

    pub fn latest(&self) -> &SensorState {
        self.frames.back().expect("window is never empty")
    }

    pub fn push(&mut self, frame: SensorState) -> Result<()> {
        if frame.rows() != self.m {
            return Err(Error::Domain(format!("frame has {} rows, window expects {}", frame.rows(), self.m)));
        }
        self.frames.push_back(frame);
        while self.frames.len() > self.k {
            self.frames.pop_front();
        }
        Ok(())
    }

    /// K x M x 7 values, frame-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.frames.iter().flat_map(SensorState::to_flat).collect()
    }
}

/// Phases a controller may legally request now. Sorted, never empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailablePhases(Vec<PhaseId>);

impl AvailablePhases {
    pub fn new(mut phases: Vec<PhaseId>) -> Result<Self> {
        phases.sort();
        phases.dedup();
        if phases.is_empty() {
            return Err(Error::Domain("available phase set must be nonempty".into()));
        }
        Ok(AvailablePhases(phases))
    }

    pub fn contains(&self, p: PhaseId) -> bool {
        self.0.binary_search(&p).is_ok()
    }

    pub fn as_slice(&self) -> &[PhaseId] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = PhaseId> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// 0/1 mask over phase indices `0..num_phases`.
    pub fn mask(&self, num_phases: usize) -> Vec<bool> {
        (1..=num_phases).map(|k| self.contains(PhaseId(k))).collect()
    }
}

pub fn available_phases(world: &WorldState) -> AvailablePhases {
    let sig = &world.signal;
    let phases = if sig.in_yellow {
        vec![sig.next_green()]
    } else if !sig.min_green_ok() {
        vec![sig.active_phase]
    } else {
        world.intersection.phase_ids().collect()
    };
    AvailablePhases(phases)
}
