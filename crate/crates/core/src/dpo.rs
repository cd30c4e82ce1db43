//! Direct preference optimization.
//!
//! Pairs of chunks for one observation are scored by the current policy and
//! a frozen reference; the loss is `softplus(−β·Δ)` with
//! `Δ = (cur⁺ − ref⁺) − (cur⁻ − ref⁻)`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scope;
use crate::numkit::{checkpoint_load, checkpoint_save, derive_seed, Matrix, RngState, TensorMap};
use crate::optim::{warmup_constant, Adam, AdamConfig};
use crate::policy::{ActionChunk, ChunkShape, ObsDims, Observation, TrainablePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_steps: usize,
    pub warmup: usize,
    pub adam: AdamConfig,
    /// Which parameters receive updates.
    pub scope: Scope,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 5e-5,
            batch: 1,
            max_steps: 500,
            warmup: 100,
            adam: AdamConfig::default(),
            scope: Scope::Adapter,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.lr >= 0.0) || self.batch == 0 || self.max_steps == 0 {
            return Err(Error::Config(format!(
                "beta and batch/max_steps must be positive, lr non-negative: {self:?}"
            )));
        }
        if self.warmup > self.max_steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds max_steps {}",
                self.warmup, self.max_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGenConfig {
    pub n_pairs: usize,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub seed: u64,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        Self {
            n_pairs: 200,
            sigma_start: 0.1,
            sigma_end: 0.4,
            seed: 0,
        }
    }
}

impl PairGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_start > 0.0 && self.sigma_start <= self.sigma_end) {
            return Err(Error::Config(format!(
                "need 0 < sigma_start <= sigma_end, got {} and {}",
                self.sigma_start, self.sigma_end
            )));
        }
        Ok(())
    }

    /// Linear ramp over pair indices; constant `sigma_start` when fewer than two pairs.
    pub fn sigma(&self, i: usize) -> f64 {
        if self.n_pairs < 2 {
            return self.sigma_start;
        }
        self.sigma_start + (self.sigma_end - self.sigma_start) * i as f64 / (self.n_pairs - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub obs: Observation,
    pub chosen: ActionChunk,
    pub rejected: ActionChunk,
    /// Seed for the stochastic part of the log-probability estimator.
    pub noise_seed: u64,
    pub sigma: f64,
    /// Chosen and rejected coincide, so the pair carries no preference.
    pub degenerate: bool,
}

impl PreferencePair {
    /// `rejected = chosen + σ·z` with `z` drawn from `perturb_seed`.
    pub fn perturbed(obs: Observation, chosen: ActionChunk, sigma: f64, perturb_seed: u64, noise_seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::arg(format!("sigma {sigma} must be non-negative")));
        }
        let mut rng = RngState::new(perturb_seed);
        let mut rejected = chosen.clone();
        for v in rejected.as_mut_slice() {
            *v += sigma * rng.gaussian();
        }
        let degenerate = rejected == chosen;
        Ok(Self {
            obs,
            chosen,
            rejected,
            noise_seed,
            sigma,
            degenerate,
        })
    }
}

/// Builds `cfg.n_pairs` pairs. `source(rng)` returns an observation and its
/// clean chunk; each pair gets its own stream so generation order does not
/// matter and pairs are built in parallel.
pub fn generate_pairs<F>(source: F, cfg: &PairGenConfig) -> Result<Vec<PreferencePair>>
where
    F: Fn(&mut RngState) -> Result<(Observation, ActionChunk)> + Sync,
{
    cfg.validate()?;
    (0..cfg.n_pairs)
        .into_par_iter()
        .map(|i| {
            let base = derive_seed(cfg.seed, i as u64);
            let (obs, chosen) = source(&mut RngState::new(derive_seed(base, 0)))?;
            PreferencePair::perturbed(obs, chosen, cfg.sigma(i), derive_seed(base, 1), derive_seed(base, 2))
        })
        .collect()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `(loss, Δ)` for one pair.
pub fn dpo_loss(cur_chosen: f64, ref_chosen: f64, cur_rejected: f64, ref_rejected: f64, beta: f64) -> (f64, f64) {
    let delta = (cur_chosen - ref_chosen) - (cur_rejected - ref_rejected);
    (softplus(-beta * delta), delta)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub loss: Vec<f64>,
    pub margin: Vec<f64>,
    pub logp_chosen: Vec<f64>,
    pub logp_rejected: Vec<f64>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }

    /// Mean margin over the last `n` steps.
    pub fn tail_margin(&self, n: usize) -> f64 {
        let tail = &self.margin[self.margin.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,loss,margin,logp_chosen,logp_rejected")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{i},{:e},{:e},{:e},{:e}",
                self.loss[i], self.margin[i], self.logp_chosen[i], self.logp_rejected[i]
            )?;
        }
        Ok(())
    }
}

/// Current and reference log-probabilities of both chunks of a pair.
pub fn pair_logps<P: TrainablePolicy>(policy: &P, pair: &PreferencePair) -> Result<[f64; 4]> {
    let s = pair.noise_seed;
    let batch = crate::policy::Batch {
        observations: vec![pair.obs.clone(), pair.obs.clone()],
    };
    let lp = policy.policy_logp_with_ref(&batch, &[pair.chosen.clone(), pair.rejected.clone()], s)?;
    Ok([lp[0].0, lp[0].1, lp[1].0, lp[1].1])
}

/// Preference training. The reference must already be frozen.
pub fn train_dpo<P: TrainablePolicy>(policy: &mut P, pairs: &[PreferencePair], cfg: &DpoConfig, seed: u64) -> Result<TrainLog> {
    cfg.validate()?;
    if !policy.has_reference() {
        return Err(Error::State("snapshot the reference before training".into()));
    }
    if pairs.is_empty() {
        return Err(Error::arg("no preference pairs"));
    }
    let mut rng = RngState::new(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut params = policy.flat_params(cfg.scope);
    let mut opt = Adam::new(params.len(), cfg.adam);
    let mut log = TrainLog::default();
    for step in 0..cfg.max_steps {
        let mut grad = vec![0.0; params.len()];
        let (mut loss, mut margin, mut lpc, mut lpr) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..cfg.batch {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                rng.shuffle(&mut order);
                order.reverse();
            }
            let pair = &pairs[order.pop().expect("refilled above")];
            let (cur_c, g_c) = policy.logp_and_grad(&pair.obs, &pair.chosen, pair.noise_seed, cfg.scope)?;
            let (cur_r, g_r) = policy.logp_and_grad(&pair.obs, &pair.rejected, pair.noise_seed, cfg.scope)?;
            let ref_c = policy.reference_logp(&pair.obs, &pair.chosen, pair.noise_seed)?;
            let ref_r = policy.reference_logp(&pair.obs, &pair.rejected, pair.noise_seed)?;
            let (l, d) = dpo_loss(cur_c, ref_c, cur_r, ref_r, cfg.beta);
            // dL/dΔ = −β·σ(−βΔ)
            let w = -cfg.beta * sigmoid(-cfg.beta * d) / cfg.batch as f64;
            for ((g, a), b) in grad.iter_mut().zip(&g_c).zip(&g_r) {
                *g += w * (a - b);
            }
            loss += l;
            margin += d;
            lpc += cur_c;
            lpr += cur_r;
        }
        let n = cfg.batch as f64;
        let loss = loss / n;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                reason: format!("loss {loss} or gradient is not finite"),
            });
        }
        log.loss.push(loss);
        log.margin.push(margin / n);
        log.logp_chosen.push(lpc / n);
        log.logp_rejected.push(lpr / n);
        opt.step(&mut params, &grad, warmup_constant(step, cfg.warmup, cfg.lr));
        policy.set_flat_params(cfg.scope, &params)?;
    }
    Ok(log)
}

/// Δ for each pair under the policy and its reference.
pub fn evaluate_margins<P: TrainablePolicy>(policy: &P, pairs: &[PreferencePair]) -> Result<Vec<f64>> {
    pairs
        .par_iter()
        .map(|p| {
            let [cc, rc, cr, rr] = pair_logps(policy, p)?;
            Ok(dpo_loss(cc, rc, cr, rr, 1.0).1)
        })
        .collect()
}

pub fn positive_fraction(values: &[f64]) -> f64 {
    values.iter().filter(|&&v| v > 0.0).count() as f64 / values.len().max(1) as f64
}

/// Successes over trials across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pooled {
    pub successes: u64,
    pub trials: u64,
}

impl Pooled {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

impl fmt::Display for Pooled {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}% ({}/{})", 100.0 * self.rate(), self.successes, self.trials)
    }
}

pub fn pooled_success(per_seed: &[(u64, u64)]) -> Result<Pooled> {
    if per_seed.is_empty() {
        return Err(Error::arg("no seeds to pool"));
    }
    for &(s, t) in per_seed {
        if t == 0 {
            return Err(Error::arg("a seed reports zero trials"));
        }
        if s > t {
            return Err(Error::arg(format!("{s} successes out of {t} trials")));
        }
    }
    Ok(Pooled {
        successes: per_seed.iter().map(|p| p.0).sum(),
        trials: per_seed.iter().map(|p| p.1).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairIndex {
    id: usize,
    noise_seed: u64,
    sigma: f64,
    degenerate: bool,
}

fn obs_matrix(o: &Observation) -> Matrix {
    let flat = o.flatten();
    Matrix::from_vec(1, flat.len(), flat).expect("row vector")
}

/// Chunks and observations go to a checkpoint, metadata to JSON lines.
pub fn save_pairs(pairs: &[PreferencePair], tensors: impl AsRef<Path>, index: impl AsRef<Path>) -> Result<()> {
    let mut map = TensorMap::new();
    let mut lines = Vec::new();
    for (id, p) in pairs.iter().enumerate() {
        map.insert(format!("pair/{id:06}/obs"), obs_matrix(&p.obs));
        map.insert(format!("pair/{id:06}/chosen"), p.chosen.matrix().clone());
        map.insert(format!("pair/{id:06}/rejected"), p.rejected.matrix().clone());
        let entry = PairIndex {
            id,
            noise_seed: p.noise_seed,
            sigma: p.sigma,
            degenerate: p.degenerate,
        };
        lines.push(serde_json::to_string(&entry)?);
    }
    checkpoint_save(&map, tensors)?;
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(index, text)?;
    Ok(())
}

pub fn load_pairs(dims: ObsDims, shape: ChunkShape, tensors: impl AsRef<Path>, index: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    let map = checkpoint_load(tensors)?;
    let text = std::fs::read_to_string(index)?;
    let get = |key: String| map.get(&key).cloned().ok_or_else(|| Error::Config(format!("missing tensor {key}")));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let e: PairIndex = serde_json::from_str(line)?;
            let flat = get(format!("pair/{:06}/obs", e.id))?.into_vec();
            if flat.len() != dims.flat_len() {
                return Err(Error::shape(format!("pair {} observation length {}", e.id, flat.len())));
            }
            let (a, rest) = flat.split_at(dims.img);
            let (w, rest) = rest.split_at(dims.img);
            let (t, p) = rest.split_at(dims.txt);
            let obs = Observation {
                agent_view: a.to_vec(),
                wrist_view: w.to_vec(),
                instruction: t.to_vec(),
                proprio: p.to_vec(),
            };
            let chosen = ActionChunk::new(get(format!("pair/{:06}/chosen", e.id))?)?;
            let rejected = ActionChunk::new(get(format!("pair/{:06}/rejected", e.id))?)?;
            chosen.ensure_shape(shape)?;
            rejected.ensure_shape(shape)?;
            Ok(PreferencePair {
                obs,
                chosen,
                rejected,
                noise_seed: e.noise_seed,
                sigma: e.sigma,
                degenerate: e.degenerate,
            })
        })
        .collect()
}
