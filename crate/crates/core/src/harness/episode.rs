//! One closed-loop episode: observe, propose, optionally refine, execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics_from_vehicles, MetricsRecord};
use crate::baselines::{Controller, ControllerDecision, DecisionContext, FixTime, MaxPressure, Webster};
use crate::error::{Error, Result};
use crate::nn::PolicyParams;
use crate::ppo::{phase_map, select_action, ActionMode};
use crate::refine::{refine, Backend, BackendConfig, RefinementResult};
use crate::semantics::{assemble, describe, Components, PerceptionNoise, TrafficRules};
use crate::sensing::{available_phases, build_sensor_state, ObservationWindow, DEFAULT_FLOW_WINDOW};
use crate::sim::{LogEntry, ScenarioConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Fixtime,
    Webster,
    Maxpressure,
    Rl,
    Reasonlight,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::Fixtime,
        ControllerKind::Webster,
        ControllerKind::Maxpressure,
        ControllerKind::Rl,
        ControllerKind::Reasonlight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Fixtime => "fixtime",
            ControllerKind::Webster => "webster",
            ControllerKind::Maxpressure => "maxpressure",
            ControllerKind::Rl => "rl",
            ControllerKind::Reasonlight => "reasonlight",
        }
    }

    pub fn needs_params(self) -> bool {
        matches!(self, ControllerKind::Rl | ControllerKind::Reasonlight)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeOptions {
    pub noise: PerceptionNoise,
    pub flow_window: u64,
    /// Seed of the perception-noise stream, combined with the scenario seed.
    pub perception_seed: u64,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions { noise: PerceptionNoise::default(), flow_window: DEFAULT_FLOW_WINDOW, perception_seed: 0 }
    }
}

/// What was decided at one tick.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub clock: u64,
    pub available: Vec<usize>,
    pub proposed: usize,
    pub executed: usize,
    pub attempts: u32,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    pub metrics: MetricsRecord,
    pub log: Vec<LogEntry>,
    /// One line per refined decision; empty for other controllers.
    pub decision_log: Vec<String>,
    pub decisions: Vec<DecisionRecord>,
    /// Vehicles that entered, including emergency spawns.
    pub entered: u64,
    pub min_green: u32,
    pub yellow: u32,
}

impl EpisodeOutput {
    pub fn log_lines(&self) -> Vec<String> {
        self.log.iter().map(ToString::to_string).collect()
    }
}

/// Greedy (or sampled) backbone behind the common controller interface.
pub struct RlController<'p> {
    params: &'p PolicyParams,
    phases: Vec<Vec<usize>>,
    mode: ActionMode,
    rng: ChaCha8Rng,
}

impl<'p> RlController<'p> {
    pub fn new(params: &'p PolicyParams, phases: Vec<Vec<usize>>, mode: ActionMode, seed: u64) -> Self {
        RlController { params, phases, mode, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Controller for RlController<'_> {
    fn name(&self) -> &'static str {
        "rl"
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<ControllerDecision> {
        let choice = select_action(self.params, ctx.window, &self.phases, ctx.avail, self.mode, &mut self.rng)?;
        Ok(ControllerDecision { target: choice.phase, reason: "policy" })
    }
}

/// Evaluator used by a reasonlight episode.
pub struct Refiner<'b> {
    pub backend: Option<&'b mut dyn Backend>,
    pub k: u32,
    pub components: Components,
}

/// Run Algorithm 1 with an explicit evaluator. `refiner` is required for
/// reasonlight and ignored otherwise.
pub fn run_episode_with(
    scenario: &ScenarioConfig,
    kind: ControllerKind,
    params: Option<&PolicyParams>,
    mut refiner: Option<Refiner<'_>>,
    opts: &EpisodeOptions,
) -> Result<EpisodeOutput> {
    opts.noise.validate()?;
    let mut world = scenario.build_world()?;
    let phases = phase_map(&world.intersection);
    let mut controller: Box<dyn Controller + '_> = match kind {
        ControllerKind::Fixtime => Box::new(FixTime::default()),
        ControllerKind::Webster => Box::new(Webster::default()),
        ControllerKind::Maxpressure => Box::new(MaxPressure),
        ControllerKind::Rl | ControllerKind::Reasonlight => {
            let p = params.ok_or_else(|| Error::Config(format!("controller {} needs trained params", kind.name())))?;
            if p.cfg.window == 0 {
                return Err(Error::Config("policy window must be positive".into()));
            }
            Box::new(RlController::new(p, phases.clone(), ActionMode::Greedy, scenario.sim.seed))
        }
    };
    let refining = kind == ControllerKind::Reasonlight;
    if refining && refiner.is_none() {
        return Err(Error::Config("reasonlight needs a backend configuration".into()));
    }
    let k = params.map_or(1, |p| p.cfg.window);
    let mut window = ObservationWindow::new(k, world.intersection.movements.len());
    let rules = TrafficRules::from_intersection(&world.intersection, world.signal.min_green, world.signal.yellow_len);
    let mut perception_rng = ChaCha8Rng::seed_from_u64(opts.perception_seed ^ scenario.sim.seed.rotate_left(17));

    let mut decisions = Vec::with_capacity(scenario.sim.duration as usize);
    let mut decision_log = Vec::new();
    let (mut preserved, mut refined) = (0u64, 0u64);
    while world.clock < scenario.sim.duration {
        let j = build_sensor_state(&world, opts.flow_window);
        window.push(j.clone())?;
        let avail = available_phases(&world);
        let proposed = controller.decide(&DecisionContext { world: &world, window: &window, avail: &avail })?.target;
        let (executed, attempts) = match refiner.as_mut().filter(|_| refining) {
            Some(r) => {
                let scene = describe(&world, &j, &opts.noise, &mut perception_rng)?;
                let ctx = assemble(scene.omega_s, scene.omega_v, proposed, avail.clone(), rules.clone(), r.components)?;
                let result = match r.backend.as_deref_mut() {
                    Some(b) => refine(&ctx, b, r.k),
                    None => RefinementResult::keep(&ctx),
                };
                if result.preserved {
                    preserved += 1;
                } else {
                    refined += 1;
                }
                decision_log.push(result.log_line(world.clock, proposed));
                (result.executed, result.attempts)
            }
            None => (proposed, 0),
        };
        if !avail.contains(executed) {
            return Err(Error::Contract(format!("phase {executed} executed outside the available set at {}", world.clock)));
        }
        decisions.push(DecisionRecord {
            clock: world.clock,
            available: avail.iter().map(|p| p.0).collect(),
            proposed: proposed.0,
            executed: executed.0,
            attempts,
        });
        world.request_phase(executed)?;
        world.step();
    }

    let mut metrics = metrics_from_vehicles(&world.completed, world.in_queue() as u64);
    metrics.preserved = preserved;
    metrics.refined = refined;
    Ok(EpisodeOutput {
        metrics,
        entered: world.entered,
        min_green: world.signal.min_green,
        yellow: world.signal.yellow_len,
        log: world.log,
        decision_log,
        decisions,
    })
}

/// Run an episode with the evaluator described by `backend`.
pub fn run_episode(
    scenario: &ScenarioConfig,
    kind: ControllerKind,
    params: Option<&PolicyParams>,
    backend: Option<&BackendConfig>,
    opts: &EpisodeOptions,
) -> Result<EpisodeOutput> {
    if kind != ControllerKind::Reasonlight {
        return run_episode_with(scenario, kind, params, None, opts);
    }
    let cfg = backend.ok_or_else(|| Error::Config("reasonlight needs a backend configuration".into()))?;
    let mut built = cfg.build()?;
    let backend = built.as_mut().map(|b| &mut **b as &mut dyn Backend);
    let refiner = Refiner { backend, k: cfg.k, components: cfg.components };
    run_episode_with(scenario, kind, params, Some(refiner), opts)
}
