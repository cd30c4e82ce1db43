//! Seeded rollouts of a policy in the reach env with and without caching.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cache::{chunk_cache_step, prefix_cache_step, CacheState, CacheStats};
use super::env::{ReachConfig, ReachEnv};
use super::latency::StageCostModel;
use crate::error::{Error, Result};
use crate::numkit::derive_seed;
use crate::policy::{ActionChunk, ConditionedSampler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CacheMode {
    None,
    Chunk { threshold: f64 },
    Prefix { threshold: f64, max_consecutive: usize },
}

impl CacheMode {
    pub fn label(&self) -> String {
        match self {
            CacheMode::None => "none".into(),
            CacheMode::Chunk { threshold } => format!("chunk@{threshold}"),
            CacheMode::Prefix { threshold, max_consecutive } => format!("prefix@{threshold}x{max_consecutive}"),
        }
    }
}

/// Seed of the `k`-th policy call in the trial seeded `trial_seed`.
pub fn call_seed(trial_seed: u64, k: usize) -> u64 {
    derive_seed(derive_seed(trial_seed, u64::MAX - 1), k as u64)
}

pub fn trial_seed(suite_seed: u64, trial: usize) -> u64 {
    derive_seed(suite_seed, trial as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub sim: Option<f64>,
    pub hit: bool,
    /// Fresh policy call made at this step.
    pub call: bool,
    pub cost_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    /// Policy invocations, hits included for the prefix strategy.
    pub calls: usize,
    pub modeled_ms: f64,
    pub stats: CacheStats,
    /// `(consecutive reuses, L2 deviation from a fresh computation)` per hit.
    pub deviations: Vec<(usize, f64)>,
    pub actions: Vec<Vec<f64>>,
    pub trace: Vec<StepTrace>,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn run_episode<S: ConditionedSampler>(
    policy: &S,
    env_cfg: &ReachConfig,
    mode: CacheMode,
    cost: &StageCostModel,
    seed: u64,
) -> Result<EpisodeResult> {
    if policy.chunk_shape() != env_cfg.chunk || policy.obs_dims() != env_cfg.obs {
        return Err(Error::Config("policy and env disagree on observation or chunk shape".into()));
    }
    let mut env = ReachEnv::new(*env_cfg)?;
    let mut obs = env.reset(seed);
    let horizon = env_cfg.chunk.horizon;
    let mut out = EpisodeResult {
        seed,
        success: false,
        steps: 0,
        calls: 0,
        modeled_ms: 0.0,
        stats: CacheStats::default(),
        deviations: Vec::new(),
        actions: Vec::new(),
        trace: Vec::new(),
    };
    let mut pending: Option<(ActionChunk, usize)> = None;
    let mut chunk_cache: CacheState<ActionChunk> = CacheState::default();
    let mut prefix_cache: CacheState<S::Encoded> = CacheState::default();

    loop {
        let step = env.steps();
        let mut trace = StepTrace {
            step,
            sim: None,
            hit: false,
            call: false,
            cost_ms: 0.0,
        };
        let action = match mode {
            CacheMode::Chunk { threshold } => {
                let s = chunk_cache_step(&mut chunk_cache, &obs, policy, threshold, |k| call_seed(seed, k))?;
                trace.sim = s.sim;
                trace.hit = s.hit;
                trace.call = !s.hit;
                trace.cost_ms = cost.cache_check_overhead_ms + if s.hit { 0.0 } else { cost.call_ms() };
                if s.hit {
                    let fresh = policy.sample_actions(&obs, 0, call_seed(seed, chunk_cache.calls))?;
                    out.deviations.push((chunk_cache.consecutive, l2(&s.action, fresh.action(0))));
                }
                s.action
            }
            CacheMode::None | CacheMode::Prefix { .. } => {
                let need = pending.as_ref().is_none_or(|(_, i)| *i >= horizon);
                if need {
                    let k = out.calls;
                    let chunk = if let CacheMode::Prefix { threshold, max_consecutive } = mode {
                        let s = prefix_cache_step(&mut prefix_cache, &obs, policy, threshold, max_consecutive, call_seed(seed, k))?;
                        trace.sim = s.sim;
                        trace.hit = s.hit;
                        trace.cost_ms = cost.cache_check_overhead_ms + if s.hit { cost.prefix_hit_ms() } else { cost.call_ms() };
                        if s.hit {
                            let fresh = policy.sample_actions(&obs, 0, call_seed(seed, k))?;
                            out.deviations.push((s.consecutive, l2(s.chunk.as_slice(), fresh.as_slice())));
                        }
                        s.chunk
                    } else {
                        trace.cost_ms = cost.call_ms();
                        policy.sample_actions(&obs, 0, call_seed(seed, k))?
                    };
                    trace.call = true;
                    out.calls += 1;
                    pending = Some((chunk, 0));
                }
                let (chunk, i) = pending.as_mut().expect("filled above");
                let a = chunk.action(*i).to_vec();
                *i += 1;
                a
            }
        };
        let (next, outcome) = env.step(&action)?;
        out.modeled_ms += trace.cost_ms;
        out.actions.push(action);
        out.trace.push(trace);
        obs = next;
        if outcome.done {
            out.success = outcome.success;
            out.steps = env.steps();
            break;
        }
    }
    if let CacheMode::Chunk { .. } = mode {
        out.calls = chunk_cache.calls;
        out.stats = chunk_cache.stats;
    } else {
        out.stats = prefix_cache.stats;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseBucket {
    pub consecutive: usize,
    pub mean_deviation: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub decisions: u64,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
    pub mean_sim: Option<f64>,
    pub max_sim: Option<f64>,
    pub max_consecutive: u64,
}

impl From<&CacheStats> for CacheSummary {
    fn from(s: &CacheStats) -> Self {
        Self {
            decisions: s.decisions,
            hits: s.hits,
            misses: s.misses,
            hit_rate: s.hit_rate(),
            mean_sim: s.mean_sim(),
            max_sim: s.sims.iter().cloned().reduce(f64::max),
            max_consecutive: s.max_consecutive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub mode: CacheMode,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub modeled_ms: f64,
    pub env_steps: usize,
    pub calls: usize,
    pub cache: CacheSummary,
    pub mean_deviation: f64,
    pub deviation_by_reuse: Vec<ReuseBucket>,
    #[serde(skip)]
    pub episodes: Vec<EpisodeResult>,
}

impl SuiteResult {
    /// Whether mean deviation never drops as consecutive reuse grows.
    pub fn staleness_monotone(&self) -> bool {
        self.deviation_by_reuse
            .windows(2)
            .all(|w| w[1].mean_deviation >= w[0].mean_deviation)
    }
}

pub fn rollout_suite<S: ConditionedSampler>(
    policy: &S,
    env_cfg: &ReachConfig,
    mode: CacheMode,
    n_trials: usize,
    cost: &StageCostModel,
    seed: u64,
) -> Result<SuiteResult> {
    cost.validate()?;
    if n_trials == 0 {
        return Err(Error::arg("n_trials must be positive"));
    }
    let episodes = (0..n_trials)
        .into_par_iter()
        .map(|t| run_episode(policy, env_cfg, mode, cost, trial_seed(seed, t)))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = CacheStats::default();
    let mut buckets: Vec<(f64, usize)> = Vec::new();
    let mut devs = Vec::new();
    for e in &episodes {
        stats.merge(&e.stats);
        for &(k, d) in &e.deviations {
            if buckets.len() < k {
                buckets.resize(k, (0.0, 0));
            }
            buckets[k - 1].0 += d;
            buckets[k - 1].1 += 1;
            devs.push(d);
        }
    }
    let successes = episodes.iter().filter(|e| e.success).count();
    Ok(SuiteResult {
        mode,
        trials: n_trials,
        successes,
        success_rate: successes as f64 / n_trials as f64,
        modeled_ms: episodes.iter().map(|e| e.modeled_ms).sum(),
        env_steps: episodes.iter().map(|e| e.steps).sum(),
        calls: episodes.iter().map(|e| e.calls).sum(),
        cache: CacheSummary::from(&stats),
        mean_deviation: if devs.is_empty() { 0.0 } else { devs.iter().sum::<f64>() / devs.len() as f64 },
        deviation_by_reuse: buckets
            .iter()
            .enumerate()
            .filter(|(_, b)| b.1 > 0)
            .map(|(i, b)| ReuseBucket {
                consecutive: i + 1,
                mean_deviation: b.0 / b.1 as f64,
                count: b.1,
            })
            .collect(),
        episodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub env: ReachConfig,
    pub cost: StageCostModel,
    pub n_trials: usize,
    pub seed: u64,
    /// Minimum cache-off success rate before strategies are compared.
    pub gate: f64,
    pub strategies: Vec<CacheMode>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            env: ReachConfig::default(),
            cost: StageCostModel::default(),
            n_trials: 50,
            seed: 0,
            gate: 0.9,
            strategies: vec![
                CacheMode::Chunk { threshold: 0.95 },
                CacheMode::Prefix {
                    threshold: 0.999,
                    max_consecutive: 1,
                },
                CacheMode::Prefix {
                    threshold: 0.92,
                    max_consecutive: 50,
                },
                CacheMode::Prefix {
                    threshold: 0.98,
                    max_consecutive: 5,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub baseline: SuiteResult,
    pub gate_passed: bool,
    pub strategies: Vec<SuiteResult>,
}

/// Baseline first; strategies only run when the baseline clears the gate.
pub fn cache_benchmark<S: ConditionedSampler>(policy: &S, cfg: &BenchConfig) -> Result<BenchReport> {
    let baseline = rollout_suite(policy, &cfg.env, CacheMode::None, cfg.n_trials, &cfg.cost, cfg.seed)?;
    let gate_passed = baseline.success_rate >= cfg.gate;
    let strategies = if gate_passed {
        cfg.strategies
            .iter()
            .map(|&m| rollout_suite(policy, &cfg.env, m, cfg.n_trials, &cfg.cost, cfg.seed))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(BenchReport {
        baseline,
        gate_passed,
        strategies,
    })
}
