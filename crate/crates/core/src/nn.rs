//! Junction encoder with actor and critic heads, forward pass and
//! hand-written reverse-mode gradients.
//!
//! Layout of one forward pass for a window of K frames over M movements:
//!
//! ```text
//! e[f][i]  = tanh(We x[f][i] + be)                 shared movement embedding
//! g[f]     = mean_i e[f][i]                        junction pooling per frame
//! h        = tanh(Wh [g[1]; ..; g[K]] + bh)        temporal hidden state
//! V        = wv . h + bv                           critic
//! P_k[f]   = mean_{i in phase k} e[f][i]           phase pooling
//! u_k      = tanh(Ws [P_k[1]; ..; P_k[K]; h] + bs) shared phase scorer
//! logit_k  = wo . u_k                              actor
//! ```
//!
//! Sharing the phase scorer across phases keeps the actor permutation
//! equivariant, so the same network handles 3- and 4-phase templates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensing::FEATURE_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub feature_dim: usize,
    pub embed: usize,
    pub hidden: usize,
    pub scorer: usize,
    /// Frames in the observation window (K).
    pub window: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { feature_dim: FEATURE_DIM, embed: 32, hidden: 64, scorer: 32, window: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tensor {
    EmbedW,
    EmbedB,
    HiddenW,
    HiddenB,
    CriticW,
    CriticB,
    ScorerW,
    ScorerB,
    ScorerOut,
}

impl Tensor {
    pub const ALL: [Tensor; 9] = [
        Tensor::EmbedW,
        Tensor::EmbedB,
        Tensor::HiddenW,
        Tensor::HiddenB,
        Tensor::CriticW,
        Tensor::CriticB,
        Tensor::ScorerW,
        Tensor::ScorerB,
        Tensor::ScorerOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::EmbedW => "embed.w",
            Tensor::EmbedB => "embed.b",
            Tensor::HiddenW => "hidden.w",
            Tensor::HiddenB => "hidden.b",
            Tensor::CriticW => "critic.w",
            Tensor::CriticB => "critic.b",
            Tensor::ScorerW => "scorer.w",
            Tensor::ScorerB => "scorer.b",
            Tensor::ScorerOut => "scorer.out",
        }
    }
}

impl NetConfig {
    fn pooled(&self) -> usize {
        self.embed * self.window
    }

    /// (rows, cols) of a tensor.
    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        match t {
            Tensor::EmbedW => (self.embed, self.feature_dim),
            Tensor::EmbedB => (self.embed, 1),
            Tensor::HiddenW => (self.hidden, self.pooled()),
            Tensor::HiddenB => (self.hidden, 1),
            Tensor::CriticW => (1, self.hidden),
            Tensor::CriticB => (1, 1),
            Tensor::ScorerW => (self.scorer, self.pooled() + self.hidden),
            Tensor::ScorerB => (self.scorer, 1),
            Tensor::ScorerOut => (1, self.scorer),
        }
    }

    pub fn offset(&self, t: Tensor) -> usize {
        Tensor::ALL
            .iter()
            .take_while(|x| **x != t)
            .map(|x| {
                let (r, c) = self.shape(*x);
                r * c
            })
            .sum()
    }

    pub fn num_params(&self) -> usize {
        Tensor::ALL.iter().map(|t| {
            let (r, c) = self.shape(*t);
            r * c
        }).sum()
    }
}

/// Actor and critic weights in one flat buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub cfg: NetConfig,
    pub data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(cfg: NetConfig) -> Self {
        PolicyParams { cfg, data: vec![0.0; cfg.num_params()] }
    }

    /// Glorot-uniform weights, zero biases, a near-uniform initial policy.
    pub fn init(cfg: NetConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in [Tensor::EmbedW, Tensor::HiddenW, Tensor::CriticW, Tensor::ScorerW, Tensor::ScorerOut] {
            let (r, c) = cfg.shape(t);
            let mut a = (6.0 / (r + c) as f64).sqrt();
            if t == Tensor::ScorerOut {
                a *= 0.01;
            }
            for w in p.tensor_mut(t) {
                *w = rng.gen_range(-a..a);
            }
        }
        p
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        let (r, c) = self.cfg.shape(t);
        let o = self.cfg.offset(t);
        &self.data[o..o + r * c]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let (r, c) = self.cfg.shape(t);
        let o = self.cfg.offset(t);
        &mut self.data[o..o + r * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// One observation as the network sees it.
#[derive(Clone, Copy, Debug)]
pub struct NetInput<'a> {
    /// K x M x feature_dim, frame-major.
    pub obs: &'a [f64],
    pub movements: usize,
    /// 0-based movement indices served by each phase.
    pub phases: &'a [Vec<usize>],
    /// Availability per phase index.
    pub mask: &'a [bool],
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Masked logits: unavailable phases are `-inf`.
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
}

impl ForwardOutput {
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| p * lp)
            .sum::<f64>()
    }
}

#[derive(Clone, Debug)]
struct Cache {
    emb: Vec<f64>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    phase_in: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
}

fn affine_tanh(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let cols = x.len();
    out.clear();
    out.extend(w.chunks_exact(cols).zip(b).map(|(row, bias)| {
        let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        (s + bias).tanh()
    }));
}

fn log_softmax_masked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .filter(|x| x.is_finite())
            .map(|x| (x - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|x| if x.is_finite() { x - lse } else { f64::NEG_INFINITY }).collect()
}

fn check_input(p: &PolicyParams, x: &NetInput) -> Result<()> {
    let cfg = &p.cfg;
    let expected = cfg.window * x.movements * cfg.feature_dim;
    if x.obs.len() != expected {
        return Err(Error::Domain(format!("observation has {} values, expected {expected}", x.obs.len())));
    }
    if x.mask.len() != x.phases.len() || !x.mask.iter().any(|m| *m) {
        return Err(Error::Domain("phase mask must match the phase set and allow at least one phase".into()));
    }
    Ok(())
}

fn forward_cached(p: &PolicyParams, x: &NetInput) -> Result<(ForwardOutput, Cache)> {
    check_input(p, x)?;
    let cfg = &p.cfg;
    let (e_dim, fd, k, m) = (cfg.embed, cfg.feature_dim, cfg.window, x.movements);

    let mut emb = Vec::with_capacity(k * m * e_dim);
    let mut tmp = Vec::with_capacity(e_dim);
    let (we, be) = (p.tensor(Tensor::EmbedW), p.tensor(Tensor::EmbedB));
    for row in x.obs.chunks_exact(fd) {
        affine_tanh(we, be, row, &mut tmp);
        emb.extend_from_slice(&tmp);
    }

    let mut pooled = vec![0.0; k * e_dim];
    for f in 0..k {
        let dst = &mut pooled[f * e_dim..(f + 1) * e_dim];
        for i in 0..m {
            let src = &emb[(f * m + i) * e_dim..(f * m + i + 1) * e_dim];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        dst.iter_mut().for_each(|d| *d /= m as f64);
    }

    let mut hidden = Vec::with_capacity(cfg.hidden);
    affine_tanh(p.tensor(Tensor::HiddenW), p.tensor(Tensor::HiddenB), &pooled, &mut hidden);

    let value = p.tensor(Tensor::CriticW).iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
        + p.tensor(Tensor::CriticB)[0];

    let (ws, bs, wo) = (p.tensor(Tensor::ScorerW), p.tensor(Tensor::ScorerB), p.tensor(Tensor::ScorerOut));
    let mut phase_in = Vec::with_capacity(x.phases.len());
    let mut scores = Vec::with_capacity(x.phases.len());
    let mut logits = Vec::with_capacity(x.phases.len());
    for (served, &avail) in x.phases.iter().zip(x.mask) {
        let mut input = vec![0.0; k * e_dim + cfg.hidden];
        let n = served.len().max(1) as f64;
        for f in 0..k {
            let dst = &mut input[f * e_dim..(f + 1) * e_dim];
            for &i in served {
                let src = &emb[(f * m + i) * e_dim..(f * m + i + 1) * e_dim];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= n);
        }
        input[k * e_dim..].copy_from_slice(&hidden);
        let mut u = Vec::with_capacity(cfg.scorer);
        affine_tanh(ws, bs, &input, &mut u);
        let logit: f64 = wo.iter().zip(&u).map(|(a, b)| a * b).sum();
        logits.push(if avail { logit } else { f64::NEG_INFINITY });
        phase_in.push(input);
        scores.push(u);
    }

    if !value.is_finite() || logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::Numeric("non-finite network output".into()));
    }
    let log_probs = log_softmax_masked(&logits);
    let probs = log_probs.iter().map(|lp| lp.exp()).collect();
    Ok((ForwardOutput { logits, log_probs, probs, value }, Cache { emb, pooled, hidden, phase_in, scores }))
}

/// Masked action distribution and value estimate.
pub fn forward(p: &PolicyParams, x: &NetInput) -> Result<ForwardOutput> {
    if !p.is_finite() {
        return Err(Error::Numeric("policy parameters contain non-finite values".into()));
    }
    forward_cached(p, x).map(|(out, _)| out)
}

/// Accumulate parameter gradients into `grad` given upstream derivatives
/// with respect to the (unmasked entries of the) logits and the value.
fn backward(p: &PolicyParams, x: &NetInput, cache: &Cache, dlogits: &[f64], dvalue: f64, grad: &mut [f64]) {
    let cfg = p.cfg;
    let (e_dim, fd, k, m, hd, sd) = (cfg.embed, cfg.feature_dim, cfg.window, x.movements, cfg.hidden, cfg.scorer);
    let pin = k * e_dim + hd;
    let off = |t: Tensor| cfg.offset(t);

    let mut d_hidden = vec![0.0; hd];
    let mut d_emb = vec![0.0; k * m * e_dim];

    // critic
    {
        let wv = p.tensor(Tensor::CriticW);
        let o = off(Tensor::CriticW);
        for j in 0..hd {
            grad[o + j] += dvalue * cache.hidden[j];
            d_hidden[j] += dvalue * wv[j];
        }
        grad[off(Tensor::CriticB)] += dvalue;
    }

    // actor
    let (ws, wo) = (p.tensor(Tensor::ScorerW), p.tensor(Tensor::ScorerOut));
    let (o_ws, o_bs, o_wo) = (off(Tensor::ScorerW), off(Tensor::ScorerB), off(Tensor::ScorerOut));
    let mut dz = vec![0.0; sd];
    let mut d_in = vec![0.0; pin];
    for (ph, served) in x.phases.iter().enumerate() {
        let dl = dlogits[ph];
        if dl == 0.0 || !x.mask[ph] {
            continue;
        }
        let u = &cache.scores[ph];
        let input = &cache.phase_in[ph];
        for s in 0..sd {
            grad[o_wo + s] += dl * u[s];
            dz[s] = dl * wo[s] * (1.0 - u[s] * u[s]);
            grad[o_bs + s] += dz[s];
        }
        d_in.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..sd {
            let row = &ws[s * pin..(s + 1) * pin];
            let grow = &mut grad[o_ws + s * pin..o_ws + (s + 1) * pin];
            for c in 0..pin {
                grow[c] += dz[s] * input[c];
                d_in[c] += dz[s] * row[c];
            }
        }
        for j in 0..hd {
            d_hidden[j] += d_in[k * e_dim + j];
        }
        let n = served.len().max(1) as f64;
        for f in 0..k {
            for &i in served {
                let dst = &mut d_emb[(f * m + i) * e_dim..(f * m + i + 1) * e_dim];
                let src = &d_in[f * e_dim..(f + 1) * e_dim];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s / n);
            }
        }
    }

    // hidden layer
    let wh = p.tensor(Tensor::HiddenW);
    let (o_wh, o_bh) = (off(Tensor::HiddenW), off(Tensor::HiddenB));
    let pooled_dim = k * e_dim;
    let mut d_pooled = vec![0.0; pooled_dim];
    for j in 0..hd {
        let h = cache.hidden[j];
        let dzj = d_hidden[j] * (1.0 - h * h);
        if dzj == 0.0 {
            continue;
        }
        grad[o_bh + j] += dzj;
        let row = &wh[j * pooled_dim..(j + 1) * pooled_dim];
        let grow = &mut grad[o_wh + j * pooled_dim..o_wh + (j + 1) * pooled_dim];
        for c in 0..pooled_dim {
            grow[c] += dzj * cache.pooled[c];
            d_pooled[c] += dzj * row[c];
        }
    }
    for f in 0..k {
        for i in 0..m {
            let dst = &mut d_emb[(f * m + i) * e_dim..(f * m + i + 1) * e_dim];
            let src = &d_pooled[f * e_dim..(f + 1) * e_dim];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s / m as f64);
        }
    }

    // movement embedding
    let (o_we, o_be) = (off(Tensor::EmbedW), off(Tensor::EmbedB));
    for (r, row) in x.obs.chunks_exact(fd).enumerate() {
        let e = &cache.emb[r * e_dim..(r + 1) * e_dim];
        let de = &d_emb[r * e_dim..(r + 1) * e_dim];
        for a in 0..e_dim {
            let dza = de[a] * (1.0 - e[a] * e[a]);
            if dza == 0.0 {
                continue;
            }
            grad[o_be + a] += dza;
            let g = &mut grad[o_we + a * fd..o_we + (a + 1) * fd];
            g.iter_mut().zip(row).for_each(|(gw, xv)| *gw += dza * xv);
        }
    }
}

/// Coefficients of the combined actor-critic objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefs {
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
}

/// One training sample for the clipped surrogate objective.
#[derive(Clone, Debug)]
pub struct LossSample<'a> {
    pub input: NetInput<'a>,
    /// Phase index taken.
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub target: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// Mean clipped surrogate (the quantity maximized).
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub mean_ratio: f64,
}

/// Clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

fn sample_terms(out: &ForwardOutput, s: &LossSample, c: &LossCoefs) -> (f64, f64, f64, f64) {
    let ratio = (out.log_probs[s.action] - s.old_log_prob).exp();
    let surrogate = clipped_surrogate(ratio, s.advantage, c.clip);
    let verr = out.value - s.target;
    (surrogate, verr * verr, out.entropy(), ratio)
}

/// Minibatch loss `-mean(surrogate) + c_v mean((V - G)^2) - c_e mean(H)`.
pub fn minibatch_loss(p: &PolicyParams, batch: &[LossSample], c: &LossCoefs) -> Result<LossTerms> {
    let mut acc = LossTerms::default();
    for s in batch {
        let (out, _) = forward_cached(p, &s.input)?;
        let (sur, v, h, r) = sample_terms(&out, s, c);
        acc.policy += sur;
        acc.value += v;
        acc.entropy += h;
        acc.mean_ratio += r;
    }
    let n = batch.len().max(1) as f64;
    acc.policy /= n;
    acc.value /= n;
    acc.entropy /= n;
    acc.mean_ratio /= n;
    acc.total = -acc.policy + c.value * acc.value - c.entropy * acc.entropy;
    Ok(acc)
}

/// Loss and its gradient with respect to every parameter.
pub fn minibatch_grad(p: &PolicyParams, batch: &[LossSample], c: &LossCoefs) -> Result<(LossTerms, Vec<f64>)> {
    let mut grad = vec![0.0; p.data.len()];
    let n = batch.len().max(1);
    let mut acc = accumulate_grad(p, batch, c, n, &mut grad)?;
    let n = n as f64;
    acc.policy /= n;
    acc.value /= n;
    acc.entropy /= n;
    acc.mean_ratio /= n;
    acc.total = -acc.policy + c.value * acc.value - c.entropy * acc.entropy;
    Ok((acc, grad))
}

/// Add the gradient of a minibatch loss over `n` samples, restricted to
/// the samples in `part`, into `grad`. Returned terms are unnormalized sums.
pub fn accumulate_grad(
    p: &PolicyParams,
    part: &[LossSample],
    c: &LossCoefs,
    n: usize,
    grad: &mut [f64],
) -> Result<LossTerms> {
    let n = n.max(1) as f64;
    let mut acc = LossTerms::default();
    for s in part {
        let (out, cache) = forward_cached(p, &s.input)?;
        let (sur, v, h, ratio) = sample_terms(&out, s, c);
        acc.policy += sur;
        acc.value += v;
        acc.entropy += h;
        acc.mean_ratio += ratio;

        // d surrogate / d log pi(a): rho A on the unclipped branch, 0 when
        // the clipped branch is strictly smaller.
        let unclipped = ratio * s.advantage <= ratio.clamp(1.0 - c.clip, 1.0 + c.clip) * s.advantage;
        let d_logp = if unclipped { ratio * s.advantage } else { 0.0 };
        let mut dlogits = vec![0.0; out.logits.len()];
        for (j, d) in dlogits.iter_mut().enumerate() {
            if !s.input.mask[j] {
                continue;
            }
            let pj = out.probs[j];
            let indicator = if j == s.action { 1.0 } else { 0.0 };
            // policy: -d_logp (1[j=a] - p_j); entropy: c_e p_j (log p_j + H)
            *d = (-d_logp * (indicator - pj) + c.entropy * pj * (out.log_probs[j] + h)) / n;
        }
        let dvalue = 2.0 * c.value * (out.value - s.target) / n;
        backward(p, &s.input, &cache, &dlogits, dvalue, grad);
    }
    Ok(acc)
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((w, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig { feature_dim: 7, embed: 4, hidden: 8, scorer: 4, window: 2 }
    }

    fn phases4() -> Vec<Vec<usize>> {
        vec![vec![0], vec![1], vec![2], vec![3]]
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let p = PolicyParams::zeros(tiny());
        let obs = vec![0.3; 2 * 4 * 7];
        let ph = phases4();
        let mask = [true; 4];
        let out = forward(&p, &NetInput { obs: &obs, movements: 4, phases: &ph, mask: &mask }).unwrap();
        for pr in &out.probs {
            assert!((pr - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_available_phase_is_point_mass() {
        let p = PolicyParams::init(tiny(), 4);
        let obs = vec![0.7; 2 * 4 * 7];
        let ph = phases4();
        let mask = [false, true, false, false];
        let out = forward(&p, &NetInput { obs: &obs, movements: 4, phases: &ph, mask: &mask }).unwrap();
        assert_eq!(out.probs, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(out.logits[0], f64::NEG_INFINITY);
    }

    #[test]
    fn non_finite_parameter_is_numeric_fault() {
        let mut p = PolicyParams::init(tiny(), 4);
        p.data[3] = f64::NAN;
        let obs = vec![0.0; 2 * 4 * 7];
        let ph = phases4();
        let mask = [true; 4];
        let r = forward(&p, &NetInput { obs: &obs, movements: 4, phases: &ph, mask: &mask });
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn clipped_surrogate_substitutions() {
        assert!((clipped_surrogate(1.5, 2.0, 0.2) - 2.4).abs() < 1e-12);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        assert_eq!(clipped_surrogate(1.0, 3.0, 0.2), 3.0);
    }

    #[test]
    fn layout_covers_buffer() {
        let cfg = NetConfig::default();
        let last = *Tensor::ALL.last().unwrap();
        let (r, c) = cfg.shape(last);
        assert_eq!(cfg.offset(last) + r * c, cfg.num_params());
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut w = vec![1.0, -1.0];
        let mut opt = Adam::new(2);
        opt.step(&mut w, &[0.5, -0.5], 0.1);
        assert!(w[0] < 1.0 && w[1] > -1.0);
    }
}
