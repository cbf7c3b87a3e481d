//! PPO signal-control backbone: action selection, GAE, clipped-surrogate
//! updates and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{accumulate_grad, forward, Adam, LossCoefs, LossSample, LossTerms, NetConfig, NetInput, PolicyParams};
use crate::sensing::{available_phases, build_sensor_state, AvailablePhases, ObservationWindow, DEFAULT_FLOW_WINDOW};
use crate::sim::{Intersection, PhaseId, ScenarioConfig, WorldState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Initial learning rate, decayed linearly to zero over training.
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub horizon: usize,
    /// Global gradient-norm cap per minibatch step; 0 disables.
    pub max_grad_norm: f64,
    /// Multiplier applied to rewards before they enter the buffer.
    pub reward_scale: f64,
    pub seed: u64,
    /// Measurement window for the flow feature, seconds.
    pub flow_window: u64,
    pub net: NetConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda_gae: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 3e-4,
            epochs: 10,
            batch: 128,
            horizon: 512,
            max_grad_norm: 0.5,
            reward_scale: 0.05,
            seed: 0,
            flow_window: DEFAULT_FLOW_WINDOW,
            net: NetConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !unit(self.gamma) || !unit(self.lambda_gae) {
            return Err(Error::Config("gamma and lambda_gae must lie in (0, 1]".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("clip must lie in (0, 1)".into()));
        }
        if [self.value_coef, self.entropy_coef, self.lr, self.max_grad_norm].iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::Config("coefficients must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch == 0 || self.horizon == 0 {
            return Err(Error::Config("epochs, batch and horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn coefs(&self) -> LossCoefs {
        LossCoefs { clip: self.clip, value: self.value_coef, entropy: self.entropy_coef }
    }
}

/// 0-based movement indices per phase, in phase order.
pub fn phase_map(x: &Intersection) -> Vec<Vec<usize>> {
    x.phases.iter().map(|p| p.movements.iter().map(|m| m.index()).collect()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Sample,
    #[default]
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionChoice {
    pub phase: PhaseId,
    pub log_prob: f64,
    pub value: f64,
}

/// Highest available logit, lowest phase id on ties.
pub fn greedy_index(logits: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&l, &ok)) in logits.iter().zip(mask).enumerate() {
        if ok && best.map_or(true, |b| l > logits[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn select_action(
    params: &PolicyParams,
    window: &ObservationWindow,
    phases: &[Vec<usize>],
    avail: &AvailablePhases,
    mode: ActionMode,
    rng: &mut impl Rng,
) -> Result<ActionChoice> {
    let obs = window.to_flat();
    let mask = avail.mask(phases.len());
    let out = forward(params, &NetInput { obs: &obs, movements: window.movements(), phases, mask: &mask })?;
    let idx = match mode {
        ActionMode::Greedy => greedy_index(&out.logits, &mask),
        ActionMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, p) in out.probs.iter().enumerate() {
                if !mask[i] {
                    continue;
                }
                acc += p;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
            pick
        }
    }
    .expect("mask allows at least one phase");
    Ok(ActionChoice { phase: PhaseId(idx + 1), log_prob: out.log_probs[idx], value: out.value })
}

/// Negative mean accumulated waiting over vehicles currently present; 0
/// for an empty intersection.
pub fn reward(world: &WorldState) -> f64 {
    let (n, total) = world.vehicles_present().fold((0u64, 0u64), |(n, t), v| (n + 1, t + v.waiting));
    if n == 0 {
        0.0
    } else {
        -(total as f64) / n as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    pub movements: usize,
    pub phases: Vec<Vec<usize>>,
    pub obs: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    /// Phase index taken.
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Step ended its episode.
    pub dones: Vec<bool>,
    pub deltas: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Standardized advantages, used by the policy loss only.
    pub policy_advantages: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(movements: usize, phases: Vec<Vec<usize>>) -> Self {
        RolloutBuffer { movements, phases, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(&mut self, obs: Vec<f64>, mask: Vec<bool>, action: usize, log_prob: f64, reward: f64, value: f64, done: bool) {
        self.obs.push(obs);
        self.masks.push(mask);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.dones.push(done);
    }

    /// Buffer holding only rewards, values and episode ends; enough for GAE.
    pub fn from_trajectory(rewards: &[f64], values: &[f64], dones: &[bool]) -> Self {
        RolloutBuffer { rewards: rewards.to_vec(), values: values.to_vec(), dones: dones.to_vec(), ..Default::default() }
    }

    pub fn clear(&mut self) {
        let (m, phases) = (self.movements, std::mem::take(&mut self.phases));
        *self = RolloutBuffer::new(m, phases);
    }
}

/// Fill TD residuals, GAE advantages, returns `G = A + V` and the
/// standardized advantages. `bootstrap` is V(s_T), or 0 when the last step
/// was terminal.
pub fn compute_gae(buf: &mut RolloutBuffer, bootstrap: f64, gamma: f64, lambda: f64) -> Result<()> {
    let n = buf.rewards.len();
    if n == 0 {
        return Err(Error::Domain("cannot compute advantages of an empty buffer".into()));
    }
    if buf.values.len() != n || buf.dones.len() != n {
        return Err(Error::Domain("rewards, values and dones must have equal length".into()));
    }
    buf.deltas = vec![0.0; n];
    buf.advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if buf.dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { buf.values[t + 1] } else { bootstrap };
        let delta = buf.rewards[t] + gamma * next_value * live - buf.values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        buf.deltas[t] = delta;
        buf.advantages[t] = next_adv;
    }
    buf.returns = buf.advantages.iter().zip(&buf.values).map(|(a, v)| a + v).collect();
    let mean = buf.advantages.iter().sum::<f64>() / n as f64;
    let var = buf.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt() + 1e-8;
    buf.policy_advantages = buf.advantages.iter().map(|a| (a - mean) / std).collect();
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub lr: f64,
    pub epochs: Vec<EpochStats>,
    /// Largest |rho - 1| in the very first minibatch; 0 up to rounding.
    pub first_minibatch_ratio_dev: f64,
    /// Advantages were standardized before the policy loss.
    pub standardized_advantages: bool,
}

fn grad_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient of one minibatch, split across threads in fixed-size chunks and
/// reduced in chunk order so results do not depend on scheduling.
fn parallel_minibatch_grad(params: &PolicyParams, batch: &[LossSample], coefs: &LossCoefs) -> Result<(LossTerms, Vec<f64>)> {
    const CHUNK: usize = 16;
    let n = batch.len();
    let parts: Vec<Result<(LossTerms, Vec<f64>)>> = batch
        .par_chunks(CHUNK)
        .map(|part| {
            let mut g = vec![0.0; params.data.len()];
            accumulate_grad(params, part, coefs, n, &mut g).map(|t| (t, g))
        })
        .collect();
    let mut grad = vec![0.0; params.data.len()];
    let mut terms = LossTerms::default();
    for part in parts {
        let (t, g) = part?;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        terms.policy += t.policy;
        terms.value += t.value;
        terms.entropy += t.entropy;
        terms.mean_ratio += t.mean_ratio;
    }
    let nf = n.max(1) as f64;
    terms.policy /= nf;
    terms.value /= nf;
    terms.entropy /= nf;
    terms.mean_ratio /= nf;
    terms.total = -terms.policy + coefs.value * terms.value - coefs.entropy * terms.entropy;
    Ok((terms, grad))
}

/// `epochs` passes of shuffled minibatch descent on the clipped objective.
pub fn ppo_update(
    params: &mut PolicyParams,
    opt: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<UpdateReport> {
    let n = buf.len();
    if n == 0 || buf.advantages.len() != n || buf.policy_advantages.len() != n {
        return Err(Error::Domain("ppo_update needs a buffer with computed advantages".into()));
    }
    let coefs = cfg.coefs();
    let mut report = UpdateReport { lr, standardized_advantages: true, ..Default::default() };
    let mut order: Vec<usize> = (0..n).collect();
    let mut first = true;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut stats = EpochStats::default();
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch) {
            let samples: Vec<LossSample> = idx
                .iter()
                .map(|&i| LossSample {
                    input: NetInput { obs: &buf.obs[i], movements: buf.movements, phases: &buf.phases, mask: &buf.masks[i] },
                    action: buf.actions[i],
                    old_log_prob: buf.log_probs[i],
                    advantage: buf.policy_advantages[i],
                    target: buf.returns[i],
                })
                .collect();
            if first {
                let mut dev: f64 = 0.0;
                for s in &samples {
                    let mask = s.input.mask;
                    let out = forward(params, &s.input)?;
                    debug_assert!(mask[s.action]);
                    dev = dev.max(((out.log_probs[s.action] - s.old_log_prob).exp() - 1.0).abs());
                }
                report.first_minibatch_ratio_dev = dev;
                first = false;
            }
            let (terms, mut grad) = parallel_minibatch_grad(params, &samples, &coefs)?;
            if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss: policy={} value={} entropy={} lr={lr} |theta|={}",
                    terms.policy,
                    terms.value,
                    terms.entropy,
                    grad_norm(&params.data)
                )));
            }
            if cfg.max_grad_norm > 0.0 {
                let norm = grad_norm(&grad);
                if norm > cfg.max_grad_norm {
                    let s = cfg.max_grad_norm / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            opt.step(&mut params.data, &grad, lr);
            stats.policy += terms.policy;
            stats.value += terms.value;
            stats.entropy += terms.entropy;
            stats.mean_ratio += terms.mean_ratio;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        stats.policy /= b;
        stats.value /= b;
        stats.entropy /= b;
        stats.mean_ratio /= b;
        report.epochs.push(stats);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update_idx: usize,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub curve: Vec<CurveRow>,
}

/// Seed of the i-th training episode. Disjoint from the small evaluation
/// seeds used by the harness.
pub fn training_episode_seed(cfg: &PpoConfig, i: u64) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(1_000_000 + i)
}

/// Alternate T-step rollouts on the routine scenario with PPO updates.
pub fn train(
    scenario: &ScenarioConfig,
    cfg: &PpoConfig,
    total_steps: usize,
    mut on_update: impl FnMut(&CurveRow),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if !scenario.events.is_empty() {
        return Err(Error::Config("the backbone trains on routine traffic only; scenario has events".into()));
    }
    let mut params = PolicyParams::init(cfg.net, cfg.seed);
    let mut curve = Vec::new();
    if total_steps == 0 {
        return Ok(TrainOutput { params, curve });
    }
    let mut opt = Adam::new(params.data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5050_4f00);

    let mut episode = 0u64;
    let new_world = |ep: u64| scenario.with_seed(training_episode_seed(cfg, ep)).build_world();
    let mut world = new_world(episode)?;
    let phases = phase_map(&world.intersection);
    let m = world.intersection.movements.len();
    let mut window = ObservationWindow::new(cfg.net.window, m);
    let mut buf = RolloutBuffer::new(m, phases.clone());

    let num_updates = total_steps.div_ceil(cfg.horizon);
    let mut steps = 0usize;
    for update_idx in 0..num_updates {
        buf.clear();
        let horizon = cfg.horizon.min(total_steps - steps);
        let mut reward_sum = 0.0;
        for _ in 0..horizon {
            window.push(build_sensor_state(&world, cfg.flow_window))?;
            let avail = available_phases(&world);
            let choice = select_action(&params, &window, &phases, &avail, ActionMode::Sample, &mut rng)?;
            world.request_phase(choice.phase)?;
            world.step();
            let r = reward(&world);
            reward_sum += r;
            let done = world.clock >= scenario.sim.duration;
            buf.push(
                window.to_flat(),
                avail.mask(phases.len()),
                choice.phase.index(),
                choice.log_prob,
                r * cfg.reward_scale,
                choice.value,
                done,
            );
            if done {
                episode += 1;
                world = new_world(episode)?;
                window = ObservationWindow::new(cfg.net.window, m);
            }
        }
        steps += horizon;

        let bootstrap = if *buf.dones.last().expect("nonempty rollout") {
            0.0
        } else {
            let mut w = window.clone();
            w.push(build_sensor_state(&world, cfg.flow_window))?;
            let mask = available_phases(&world).mask(phases.len());
            forward(&params, &NetInput { obs: &w.to_flat(), movements: m, phases: &phases, mask: &mask })?.value
        };
        compute_gae(&mut buf, bootstrap, cfg.gamma, cfg.lambda_gae)?;

        let lr = cfg.lr * (1.0 - update_idx as f64 / num_updates as f64);
        let report = ppo_update(&mut params, &mut opt, &buf, cfg, lr, &mut rng)?;
        let last = report.epochs.last().cloned().unwrap_or_default();
        let row = CurveRow {
            update_idx,
            mean_reward: reward_sum / horizon as f64,
            policy_loss: -last.policy,
            value_loss: last.value,
            entropy: last.entropy,
            lr,
        };
        on_update(&row);
        curve.push(row);
    }
    Ok(TrainOutput { params, curve })
}

pub fn write_curve_csv(curve: &[CurveRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    for row in curve {
        w.serialize(row).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::MovementId;
    use crate::sim::VehicleClass;

    #[test]
    fn greedy_tie_breaks_to_lowest_phase() {
        let logits = [1.0, 2.5, 0.1, 2.5];
        assert_eq!(greedy_index(&logits, &[true; 4]), Some(1));
        assert_eq!(greedy_index(&logits, &[true, false, true, true]), Some(3));
    }

    #[test]
    fn gae_hand_example() {
        let mut b = RolloutBuffer::from_trajectory(&[-1.0, -2.0], &[0.5, 0.4], &[false, true]);
        compute_gae(&mut b, 0.0, 0.99, 0.95).unwrap();
        assert!((b.deltas[0] + 1.104).abs() < 1e-12);
        assert!((b.deltas[1] + 2.4).abs() < 1e-12);
        assert!((b.advantages[0] + 3.3612).abs() < 1e-12);
        assert!((b.advantages[1] + 2.4).abs() < 1e-12);
    }

    #[test]
    fn gae_zero_and_lambda_zero_cases() {
        let mut b = RolloutBuffer::from_trajectory(&[0.0; 5], &[0.0; 5], &[false; 5]);
        compute_gae(&mut b, 0.0, 0.99, 0.95).unwrap();
        assert!(b.advantages.iter().all(|a| *a == 0.0));

        let mut b = RolloutBuffer::from_trajectory(&[1.0, -0.5, 2.0], &[0.3, 0.1, -0.2], &[false; 3]);
        compute_gae(&mut b, 0.7, 0.9, 0.0).unwrap();
        assert_eq!(b.advantages, b.deltas);
        for t in 0..3 {
            assert_eq!(b.returns[t], b.advantages[t] + b.values[t]);
        }
    }

    #[test]
    fn gae_rejects_empty_buffer() {
        let mut b = RolloutBuffer::default();
        assert!(matches!(compute_gae(&mut b, 0.0, 0.99, 0.95), Err(Error::Domain(_))));
    }

    #[test]
    fn standardized_advantages_have_zero_mean_unit_std() {
        let mut b = RolloutBuffer::from_trajectory(&[1.0, -3.0, 0.5, 2.0], &[0.1, 0.2, 0.3, 0.4], &[false; 4]);
        compute_gae(&mut b, 0.0, 0.99, 0.95).unwrap();
        let n = 4.0;
        let mean = b.policy_advantages.iter().sum::<f64>() / n;
        let var = b.policy_advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reward_is_negative_mean_waiting() {
        let mut c = ScenarioConfig::default();
        c.demand.rates = Some(vec![0.0; 8]);
        let mut w = c.build_world().unwrap();
        assert_eq!(reward(&w), 0.0);
        w.inject_vehicle(MovementId(3), VehicleClass::Regular);
        w.queues[2][0].waiting = 7;
        assert_eq!(reward(&w), -7.0);
        w.inject_vehicle(MovementId(3), VehicleClass::Regular);
        w.queues[2][0].waiting = 4;
        w.queues[2][1].waiting = 6;
        assert_eq!(reward(&w), -5.0);
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let cfg = PpoConfig::default();
        let out = train(&ScenarioConfig::default(), &cfg, 0, |_| {}).unwrap();
        assert_eq!(out.params, PolicyParams::init(cfg.net, cfg.seed));
        assert!(out.curve.is_empty());
    }

    #[test]
    fn training_refuses_event_scenarios() {
        let mut c = ScenarioConfig::default();
        c.events.push(crate::sim::ScenarioEvent::EmergencySpawn { movement: MovementId(1), start_time: 3 });
        assert!(matches!(train(&c, &PpoConfig::default(), 10, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = PpoConfig::default();
        assert!(c.validate().is_ok());
        c.clip = 1.0;
        assert!(c.validate().is_err());
        let c = PpoConfig { gamma: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
