//! Episode metrics from completed vehicles, and their recomputation from
//! the raw event log.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{LogEntry, LogKind, Vehicle, VehicleClass};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Mean entry-to-discharge time of completed regular vehicles; 0 when
    /// none completed.
    pub att: f64,
    pub awt: f64,
    /// Absent when no emergency vehicle completed.
    pub aett: Option<f64>,
    pub aewt: Option<f64>,
    pub completed: u64,
    pub emv_completed: u64,
    /// Vehicles still queued at episode end, excluded from the means.
    pub residual: u64,
    pub preserved: u64,
    pub refined: u64,
}

fn means(it: impl Iterator<Item = (u64, u64)>) -> (u64, f64, f64) {
    let (n, tt, wt) = it.fold((0u64, 0u64, 0u64), |(n, a, b), (t, w)| (n + 1, a + t, b + w));
    if n == 0 {
        (0, 0.0, 0.0)
    } else {
        (n, tt as f64 / n as f64, wt as f64 / n as f64)
    }
}

/// Metrics over exited vehicles. Decision counts are left at zero.
pub fn metrics_from_vehicles(completed: &[Vehicle], residual: u64) -> MetricsRecord {
    let of = |class: VehicleClass| {
        means(
            completed
                .iter()
                .filter(move |v| v.class == class)
                .map(|v| (v.travel_time().expect("completed vehicle has exited"), v.waiting)),
        )
    };
    let (completed_n, att, awt) = of(VehicleClass::Regular);
    let (emv_n, aett, aewt) = of(VehicleClass::Emergency);
    MetricsRecord {
        att,
        awt,
        aett: (emv_n > 0).then_some(aett),
        aewt: (emv_n > 0).then_some(aewt),
        completed: completed_n,
        emv_completed: emv_n,
        residual,
        preserved: 0,
        refined: 0,
    }
}

fn field<'a>(payload: &'a str, key: &str) -> Result<&'a str> {
    payload
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::Serialization(format!("log payload `{payload}` lacks `{key}`")))
}

fn num(payload: &str, key: &str) -> Result<u64> {
    field(payload, key)?.parse().map_err(|_| Error::Serialization(format!("`{key}` in `{payload}` is not a count")))
}

/// Rebuild the vehicle metrics from `arrive`, `emv_spawn` and `depart`
/// entries alone.
pub fn metrics_from_log(log: &[LogEntry]) -> Result<MetricsRecord> {
    let mut entered = 0u64;
    let mut regular = Vec::new();
    let mut emergency = Vec::new();
    for e in log {
        match e.kind {
            LogKind::Arrive | LogKind::EmvSpawn => entered += 1,
            LogKind::Depart => {
                let rec = (e.clock - num(&e.payload, "entry")?, num(&e.payload, "wait")?);
                match field(&e.payload, "class")? {
                    "emergency" => emergency.push(rec),
                    _ => regular.push(rec),
                }
            }
            _ => {}
        }
    }
    let (completed, att, awt) = means(regular.into_iter());
    let (emv_completed, aett, aewt) = means(emergency.into_iter());
    Ok(MetricsRecord {
        att,
        awt,
        aett: (emv_completed > 0).then_some(aett),
        aewt: (emv_completed > 0).then_some(aewt),
        completed,
        emv_completed,
        residual: entered - completed - emv_completed,
        preserved: 0,
        refined: 0,
    })
}
