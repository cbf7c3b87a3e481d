//! Multi-seed evaluation, run manifests and their export.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::episode::{run_episode, ControllerKind, EpisodeOptions};
use super::metrics::MetricsRecord;
use crate::error::{Error, Result};
use crate::nn::PolicyParams;
use crate::refine::BackendConfig;
use crate::sim::{random_emergency_events, MovementId, ScenarioConfig};

/// Seeded emergency spawns added on top of a base scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmergencySpec {
    pub count: usize,
    pub from: u64,
    pub to: u64,
    pub exclude: Vec<MovementId>,
}

impl Default for EmergencySpec {
    fn default() -> Self {
        EmergencySpec { count: 0, from: 300, to: 3300, exclude: vec![] }
    }
}

/// A named scenario family: the base document plus per-seed emergencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    pub name: String,
    pub scenario: ScenarioConfig,
    pub emergencies: Option<EmergencySpec>,
}

impl Default for Workload {
    fn default() -> Self {
        Workload { name: "routine".into(), scenario: ScenarioConfig::default(), emergencies: None }
    }
}

impl Workload {
    /// The concrete scenario for one evaluation seed.
    pub fn scenario_for(&self, seed: u64) -> Result<ScenarioConfig> {
        let mut s = self.scenario.with_seed(seed);
        if let Some(e) = &self.emergencies {
            let x = s.intersection()?;
            if e.count > 0 && e.exclude.len() >= x.movements.len() {
                return Err(Error::Config("emergency spec excludes every movement".into()));
            }
            s.events.extend(random_emergency_events(&x, e.count, e.from, e.to, seed, &e.exclude));
            s.events.sort_by_key(|ev| ev.start_time());
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub workload: Workload,
    pub controllers: Vec<ControllerKind>,
    pub seeds: Vec<u64>,
    pub backend: BackendConfig,
    pub options: EpisodeOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub scenario: String,
    pub controller: ControllerKind,
    pub metrics: MetricsRecord,
}

/// Mean and population standard deviation over seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt(), n: xs.len() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub controller: ControllerKind,
    pub att: Stat,
    pub awt: Stat,
    /// Over seeds where an emergency vehicle completed.
    pub aett: Stat,
    pub aewt: Stat,
    pub preserved: Stat,
    pub refined: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub scenario: String,
    pub records: Vec<SeedRecord>,
    pub summary: Vec<SummaryRow>,
}

pub fn digest(spec: &EvalSpec, params: Option<&PolicyParams>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    if let Some(p) = params {
        h.update(serde_json::to_vec(&p.cfg).expect("net config serializes"));
        for x in &p.data {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn summarize_records(controllers: &[ControllerKind], records: &[SeedRecord]) -> Vec<SummaryRow> {
    controllers
        .iter()
        .map(|&c| {
            let rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.controller == c).map(|r| &r.metrics).collect();
            let col = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| Stat::of(&rs.iter().filter_map(|m| f(m)).collect::<Vec<_>>());
            SummaryRow {
                controller: c,
                att: col(&|m| Some(m.att)),
                awt: col(&|m| Some(m.awt)),
                aett: col(&|m| m.aett),
                aewt: col(&|m| m.aewt),
                preserved: col(&|m| Some(m.preserved as f64)),
                refined: col(&|m| Some(m.refined as f64)),
            }
        })
        .collect()
}

/// Run every controller on every seed. Seeds run in parallel; records are
/// ordered by controller then seed.
pub fn evaluate(spec: &EvalSpec, params: Option<&PolicyParams>) -> Result<RunManifest> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    if spec.controllers.iter().any(|c| c.needs_params()) && params.is_none() {
        return Err(Error::Config("rl and reasonlight need a trained checkpoint".into()));
    }
    spec.backend.validate()?;
    let jobs: Vec<(ControllerKind, u64)> =
        spec.controllers.iter().flat_map(|c| spec.seeds.iter().map(move |s| (*c, *s))).collect();
    let records = jobs
        .par_iter()
        .map(|&(controller, seed)| {
            let scenario = spec.workload.scenario_for(seed)?;
            let ep = run_episode(&scenario, controller, params, Some(&spec.backend), &spec.options)?;
            Ok(SeedRecord { seed, scenario: spec.workload.name.clone(), controller, metrics: ep.metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunManifest {
        config_digest: digest(spec, params),
        seeds: spec.seeds.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: spec.workload.name.clone(),
        summary: summarize_records(&spec.controllers, &records),
        records,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    seed: u64,
    scenario: &'a str,
    controller: &'a str,
    att: f64,
    awt: f64,
    aett: Option<f64>,
    aewt: Option<f64>,
    completed: u64,
    emv_completed: u64,
    preserved: u64,
    refined: u64,
    residual: u64,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Serialization(format!("{other:?}")),
    }
}

pub fn write_csv(m: &RunManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in &m.records {
        let x = &r.metrics;
        w.serialize(CsvRow {
            seed: r.seed,
            scenario: &r.scenario,
            controller: r.controller.name(),
            att: x.att,
            awt: x.awt,
            aett: x.aett,
            aewt: x.aewt,
            completed: x.completed,
            emv_completed: x.emv_completed,
            preserved: x.preserved,
            refined: x.refined,
            residual: x.residual,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(m: &RunManifest, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

pub fn read_json(path: impl AsRef<Path>) -> Result<RunManifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Aligned mean ± std table, one row per controller.
pub fn summary_table(m: &RunManifest) -> String {
    let mut s = format!(
        "{:<12} {:>16} {:>16} {:>16} {:>16} {:>10} {:>10}\n",
        "controller", "ATT", "AWT", "AETT", "AEWT", "preserved", "refined"
    );
    let cell = |x: &Stat| if x.n == 0 { "-".to_string() } else { format!("{:.2} ± {:.2}", x.mean, x.std) };
    for r in &m.summary {
        let _ = writeln!(
            s,
            "{:<12} {:>16} {:>16} {:>16} {:>16} {:>10.1} {:>10.1}",
            r.controller.name(),
            cell(&r.att),
            cell(&r.awt),
            cell(&r.aett),
            cell(&r.aewt),
            r.preserved.mean,
            r.refined.mean
        );
    }
    s
}

/// One point of an emergency-count sweep for one controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub emv_count: usize,
    pub awt_mean: f64,
    pub awt_std: f64,
    pub aewt_mean: Option<f64>,
    pub preserved_mean: f64,
    pub refined_mean: f64,
}

pub fn plot_series(sweep: &[(usize, RunManifest)], controller: ControllerKind) -> Vec<PlotPoint> {
    let mut pts: Vec<PlotPoint> = sweep
        .iter()
        .filter_map(|(count, m)| {
            let r = m.summary.iter().find(|r| r.controller == controller)?;
            Some(PlotPoint {
                emv_count: *count,
                awt_mean: r.awt.mean,
                awt_std: r.awt.std,
                aewt_mean: (r.aewt.n > 0).then_some(r.aewt.mean),
                preserved_mean: r.preserved.mean,
                refined_mean: r.refined.mean,
            })
        })
        .collect();
    pts.sort_by_key(|p| p.emv_count);
    pts
}

pub fn write_plotdata(points: &[PlotPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
