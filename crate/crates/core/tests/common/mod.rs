#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsc_core::nn::{forward, minibatch_grad, minibatch_loss, LossCoefs, LossSample, NetInput, PolicyParams};

/// Owned storage behind a batch of loss samples.
pub struct TinyBatch {
    pub movements: usize,
    pub phases: Vec<Vec<usize>>,
    pub obs: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

impl TinyBatch {
    pub fn samples(&self) -> Vec<LossSample<'_>> {
        (0..self.obs.len())
            .map(|i| LossSample {
                input: NetInput { obs: &self.obs[i], movements: self.movements, phases: &self.phases, mask: &self.masks[i] },
                action: self.actions[i],
                old_log_prob: self.old_log_probs[i],
                advantage: self.advantages[i],
                target: self.targets[i],
            })
            .collect()
    }
}

/// Random observations over `movements` movements, one movement per phase,
/// with old log-probs perturbed around the current policy.
pub fn tiny_batch(params: &PolicyParams, movements: usize, n: usize, seed: u64) -> TinyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = params.cfg;
    let phases: Vec<Vec<usize>> = (0..movements).map(|i| vec![i]).collect();
    let mut b = TinyBatch {
        movements,
        phases,
        obs: vec![],
        masks: vec![],
        actions: vec![],
        old_log_probs: vec![],
        advantages: vec![],
        targets: vec![],
    };
    for _ in 0..n {
        let obs: Vec<f64> = (0..cfg.window * movements * cfg.feature_dim).map(|_| rng.gen_range(0.0..1.5)).collect();
        let mut mask: Vec<bool> = (0..movements).map(|_| rng.gen_bool(0.7)).collect();
        let forced = rng.gen_range(0..movements);
        mask[forced] = true;
        let avail: Vec<usize> = (0..movements).filter(|i| mask[*i]).collect();
        let action = avail[rng.gen_range(0..avail.len())];
        let out = forward(params, &NetInput { obs: &obs, movements, phases: &b.phases, mask: &mask }).unwrap();
        b.old_log_probs.push(out.log_probs[action] + rng.gen_range(-0.3..0.3));
        b.advantages.push(rng.gen_range(-2.0..2.0));
        b.targets.push(rng.gen_range(-1.0..1.0));
        b.actions.push(action);
        b.obs.push(obs);
        b.masks.push(mask);
    }
    b
}

/// Worst relative error between analytic and central-difference gradients
/// over `coords` parameter coordinates (all of them when `coords` covers
/// the buffer, otherwise sampled with `seed`).
pub fn finite_difference_check(params: &PolicyParams, data: &TinyBatch, coefs: &LossCoefs, coords: usize, seed: u64) -> f64 {
    const H: f64 = 1e-5;
    let samples = data.samples();
    let (_, grad) = minibatch_grad(params, &samples, coefs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if coords >= params.data.len() {
        (0..params.data.len()).collect()
    } else {
        (0..coords).map(|_| rng.gen_range(0..params.data.len())).collect()
    };
    let mut worst: f64 = 0.0;
    for i in picks {
        let mut plus = params.clone();
        plus.data[i] += H;
        let mut minus = params.clone();
        minus.data[i] -= H;
        let lp = minibatch_loss(&plus, &samples, coefs).unwrap().total;
        let lm = minibatch_loss(&minus, &samples, coefs).unwrap().total;
        let numeric = (lp - lm) / (2.0 * H);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Advantage at every step written as the explicit truncated sum of
/// discounted TD residuals, stopping at episode ends.
pub fn gae_double_sum(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta = |t: usize| {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let live = if dones[t] { 0.0 } else { 1.0 };
        rewards[t] + gamma * next * live - values[t]
    };
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for l in 0..(n - t) {
                total += (gamma * lambda).powi(l as i32) * delta(t + l);
                if dones[t + l] {
                    break;
                }
            }
            total
        })
        .collect()
}

/// Prompt context on the default four-leg intersection.
pub fn four_leg_ctx(
    omega_v: &str,
    omega_s: &str,
    rl: usize,
    avail: &[usize],
    components: tsc_core::semantics::Components,
) -> tsc_core::semantics::PromptContext {
    use tsc_core::sim::{build_intersection, PhaseId, Template};
    let x = build_intersection(Template::FourLeg, &Default::default()).unwrap();
    tsc_core::semantics::assemble(
        omega_s.into(),
        omega_v.into(),
        PhaseId(rl),
        tsc_core::sensing::AvailablePhases::new(avail.iter().map(|p| PhaseId(*p)).collect()).unwrap(),
        tsc_core::semantics::TrafficRules::from_intersection(&x, 10, 3),
        components,
    )
    .unwrap()
}
