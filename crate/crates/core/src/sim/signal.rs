//! Signal state machine: green with a minimum duration, then a fixed yellow
//! clearance before the pending phase turns green.

use serde::{Deserialize, Serialize};

use super::topology::PhaseId;

pub const DEFAULT_MIN_GREEN: u32 = 10;
pub const DEFAULT_YELLOW: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalState {
    pub active_phase: PhaseId,
    /// Seconds of green since the active phase started.
    pub phase_elapsed: u32,
    pub in_yellow: bool,
    pub yellow_remaining: u32,
    pub pending_phase: Option<PhaseId>,
    pub min_green: u32,
    pub yellow_len: u32,
}

impl SignalState {
    pub fn new(initial: PhaseId, min_green: u32, yellow_len: u32) -> Self {
        SignalState {
            active_phase: initial,
            phase_elapsed: 0,
            in_yellow: false,
            yellow_remaining: 0,
            pending_phase: None,
            min_green,
            yellow_len,
        }
    }

    pub fn min_green_ok(&self) -> bool {
        self.phase_elapsed >= self.min_green
    }

    /// The phase that is, or will be after the in-flight yellow, green.
    pub fn next_green(&self) -> PhaseId {
        self.pending_phase.unwrap_or(self.active_phase)
    }

    pub fn is_green(&self, phase: PhaseId) -> bool {
        !self.in_yellow && self.active_phase == phase
    }
}

/// What a phase request did to the signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestOutcome {
    /// Target equals the active phase.
    NoOp,
    /// Yellow clearance started toward the target.
    Accepted,
    /// Active phase has not served its minimum green.
    RejectedMinGreen,
    /// A clearance interval is already running; the pending phase wins.
    IgnoredYellow,
}

impl RequestOutcome {
    pub fn rejected(self) -> bool {
        matches!(self, RequestOutcome::RejectedMinGreen)
    }
}
