//! Safety assertions over a finished episode's event and decision logs.

use std::fmt;

use super::episode::EpisodeOutput;
use crate::sim::LogKind;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// A green phase ended before its minimum duration.
    MinGreen { clock: u64, green: u64 },
    /// A phase turned green without a full yellow since the last switch.
    Yellow { clock: u64, detail: String },
    /// An executed phase was not in the available set.
    Unavailable { clock: u64, phase: usize },
    /// Entered vehicles do not equal discharged plus residual.
    Conservation { entered: u64, departed: u64, residual: u64 },
    Malformed { clock: u64, line: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

fn kv(payload: &str, key: &str) -> Option<u64> {
    payload.split_whitespace().find_map(|p| p.strip_prefix(key)?.strip_prefix('=')?.parse().ok())
}

/// Every violation of min-green, yellow clearance, action availability and
/// vehicle conservation found in `ep`.
pub fn check_episode(ep: &EpisodeOutput) -> Vec<Violation> {
    let mut out = Vec::new();
    let min_green = ep.min_green as u64;
    let yellow = ep.yellow as u64;
    // (phase, clock it turned green)
    let mut green: Option<(u64, u64)> = None;
    // (target, clock yellow started)
    let mut clearing: Option<(u64, u64)> = None;
    let (mut entered, mut departed) = (0u64, 0u64);
    for e in &ep.log {
        match e.kind {
            LogKind::Green => {
                let Some(phase) = kv(&e.payload, "phase") else {
                    out.push(Violation::Malformed { clock: e.clock, line: e.to_string() });
                    continue;
                };
                match (green, clearing.take()) {
                    (None, None) => {}
                    (_, Some((to, start))) if to == phase && e.clock == start + yellow => {}
                    (_, c) => out.push(Violation::Yellow {
                        clock: e.clock,
                        detail: format!("phase {phase} green after clearance {c:?}"),
                    }),
                }
                green = Some((phase, e.clock));
            }
            LogKind::Yellow => {
                let (Some(from), Some(to)) = (kv(&e.payload, "from"), kv(&e.payload, "to")) else {
                    out.push(Violation::Malformed { clock: e.clock, line: e.to_string() });
                    continue;
                };
                match green {
                    Some((p, since)) if p == from => {
                        if e.clock - since < min_green {
                            out.push(Violation::MinGreen { clock: e.clock, green: e.clock - since });
                        }
                    }
                    _ => out.push(Violation::Yellow { clock: e.clock, detail: format!("yellow from {from} not green") }),
                }
                if clearing.is_some() || to == from {
                    out.push(Violation::Yellow { clock: e.clock, detail: "overlapping or self clearance".into() });
                }
                clearing = Some((to, e.clock));
                green = None;
            }
            LogKind::Arrive | LogKind::EmvSpawn => entered += 1,
            LogKind::Depart => departed += 1,
            _ => {}
        }
    }
    for d in &ep.decisions {
        if !d.available.contains(&d.executed) {
            out.push(Violation::Unavailable { clock: d.clock, phase: d.executed });
        }
    }
    if entered != ep.entered || entered != departed + ep.metrics.residual {
        out.push(Violation::Conservation { entered, departed, residual: ep.metrics.residual });
    }
    out
}

/// Green durations in seconds, in order, for every phase that ended.
pub fn green_durations(ep: &EpisodeOutput) -> Vec<u64> {
    let mut since = None;
    let mut out = Vec::new();
    for e in &ep.log {
        match e.kind {
            LogKind::Green => since = Some(e.clock),
            LogKind::Yellow => {
                if let Some(s) = since.take() {
                    out.push(e.clock - s);
                }
            }
            _ => {}
        }
    }
    out
}
