//! The single run document read by the CLI, and the sweep and ablation
//! drivers built on [`evaluate`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::episode::{ControllerKind, EpisodeOptions};
use super::evaluate::{evaluate, EmergencySpec, EvalSpec, RunManifest, Workload};
use crate::error::{Error, Result};
use crate::nn::PolicyParams;
use crate::ppo::PpoConfig;
use crate::refine::BackendConfig;
use crate::semantics::Components;
use crate::sim::ScenarioConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub checkpoint: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { steps: 50_000, checkpoint: PathBuf::from("policy.tsck") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub name: String,
    pub controllers: Vec<ControllerKind>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub emergencies: Option<EmergencySpec>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            name: "routine".into(),
            controllers: ControllerKind::ALL.to_vec(),
            seeds: (1..=10).collect(),
            out_dir: PathBuf::from("results"),
            emergencies: None,
        }
    }
}

/// Inclusive emergency-count range for `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub min_count: usize,
    pub max_count: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { min_count: 0, max_count: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub ppo: PpoConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub backend: BackendConfig,
    pub options: EpisodeOptions,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn workload(&self) -> Workload {
        Workload { name: self.eval.name.clone(), scenario: self.scenario.clone(), emergencies: self.eval.emergencies.clone() }
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            workload: self.workload(),
            controllers: self.eval.controllers.clone(),
            seeds: self.eval.seeds.clone(),
            backend: self.backend.clone(),
            options: self.options.clone(),
        }
    }
}

/// One evaluation per emergency count in `counts`, keeping everything else
/// from `base`.
pub fn sweep(base: &EvalSpec, counts: &[usize], params: Option<&PolicyParams>) -> Result<Vec<(usize, RunManifest)>> {
    counts
        .iter()
        .map(|&count| {
            let mut spec = base.clone();
            let mut e = spec.workload.emergencies.clone().unwrap_or_default();
            e.count = count;
            spec.workload.emergencies = Some(e);
            spec.workload.name = format!("{}-emv{count}", base.workload.name);
            Ok((count, evaluate(&spec, params)?))
        })
        .collect()
}

/// The three prompt configurations compared by `ablate`, weakest first.
pub const ABLATION_ROWS: [(&str, Components); 3] = [
    ("format", Components::FORMAT_ONLY),
    ("format+guidelines", Components::GUIDELINES),
    ("format+guidelines+chain", Components::FULL),
];

/// Reasonlight under each ablation row on the seeds of `base`.
pub fn ablate(base: &EvalSpec, params: &PolicyParams) -> Result<Vec<(&'static str, RunManifest)>> {
    ABLATION_ROWS
        .iter()
        .map(|&(label, components)| {
            let mut spec = base.clone();
            spec.controllers = vec![ControllerKind::Reasonlight];
            spec.backend.components = components;
            spec.workload.name = format!("{}-{label}", base.workload.name);
            Ok((label, evaluate(&spec, Some(params))?))
        })
        .collect()
}
