//! Signature-gated reuse of policy computation across environment steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ActionChunk, ConditionedSampler, Observation};

/// Default number of agent-view features averaged per signature entry.
pub const SIGNATURE_BLOCK: usize = 2;

/// Block means of the agent-view features.
pub fn signature(obs: &Observation, block: usize) -> Result<Vec<f64>> {
    if block == 0 {
        return Err(Error::arg("signature block size must be positive"));
    }
    let sig: Vec<f64> = obs
        .agent_view
        .chunks(block)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    if sig.is_empty() {
        return Err(Error::arg("observation has no agent-view features"));
    }
    Ok(sig)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine of vectors with different lengths"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::arg("cosine of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub decisions: u64,
    pub hits: u64,
    pub misses: u64,
    pub max_consecutive: u64,
    /// Similarity at every decision that had something to compare against.
    pub sims: Vec<f64>,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        if self.decisions == 0 {
            0.0
        } else {
            self.hits as f64 / self.decisions as f64
        }
    }

    pub fn mean_sim(&self) -> Option<f64> {
        (!self.sims.is_empty()).then(|| self.sims.iter().sum::<f64>() / self.sims.len() as f64)
    }

    pub fn merge(&mut self, other: &CacheStats) {
        self.decisions += other.decisions;
        self.hits += other.hits;
        self.misses += other.misses;
        self.max_consecutive = self.max_consecutive.max(other.max_consecutive);
        self.sims.extend_from_slice(&other.sims);
    }

    fn record(&mut self, hit: bool, sim: Option<f64>, consecutive: usize) {
        self.decisions += 1;
        if hit {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        self.max_consecutive = self.max_consecutive.max(consecutive as u64);
        self.sims.extend(sim);
    }
}

/// One trial's cache. `P` is the cached payload.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheState<P> {
    pub signature: Option<Vec<f64>>,
    pub payload: Option<P>,
    /// Hits since the last refresh.
    pub consecutive: usize,
    /// Next row of a cached chunk to emit.
    pub index: usize,
    pub stats: CacheStats,
    /// Number of fresh policy calls made through this cache.
    pub calls: usize,
}

impl<P> Default for CacheState<P> {
    fn default() -> Self {
        Self {
            signature: None,
            payload: None,
            consecutive: 0,
            index: 0,
            stats: CacheStats::default(),
            calls: 0,
        }
    }
}

impl<P> CacheState<P> {
    fn similarity(&self, sig: &[f64]) -> Result<Option<f64>> {
        self.signature.as_deref().map(|c| cosine_sim(c, sig)).transpose()
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::arg(format!("threshold {threshold} outside (0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStep {
    pub action: Vec<f64>,
    pub hit: bool,
    pub sim: Option<f64>,
    /// Seed of the fresh call on a miss.
    pub call_seed: Option<u64>,
}

/// Per-step chunk reuse. On a hit the cached chunk's next row is returned;
/// a miss, or a cached chunk with no rows left, calls the policy.
/// `seed_for_call(k)` gives the seed of the `k`-th fresh call.
pub fn chunk_cache_step<S: ConditionedSampler>(
    state: &mut CacheState<ActionChunk>,
    obs: &Observation,
    policy: &S,
    threshold: f64,
    seed_for_call: impl Fn(usize) -> u64,
) -> Result<ChunkStep> {
    check_threshold(threshold)?;
    let sig = signature(obs, SIGNATURE_BLOCK)?;
    let sim = state.similarity(&sig)?;
    let rows_left = state.payload.as_ref().is_some_and(|c| state.index < c.horizon());
    let hit = rows_left && sim.is_some_and(|s| s >= threshold);
    if hit {
        let chunk = state.payload.as_ref().expect("rows_left implies payload");
        let action = chunk.action(state.index).to_vec();
        state.index += 1;
        state.consecutive += 1;
        state.stats.record(true, sim, state.consecutive);
        return Ok(ChunkStep {
            action,
            hit: true,
            sim,
            call_seed: None,
        });
    }
    let seed = seed_for_call(state.calls);
    let chunk = policy.sample_actions(obs, 0, seed)?;
    state.calls += 1;
    let action = chunk.action(0).to_vec();
    state.payload = Some(chunk);
    state.signature = Some(sig);
    state.index = 1;
    state.consecutive = 0;
    state.stats.record(false, sim, 0);
    Ok(ChunkStep {
        action,
        hit: false,
        sim,
        call_seed: Some(seed),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixStep {
    pub chunk: ActionChunk,
    pub hit: bool,
    pub sim: Option<f64>,
    /// Hits in a row including this one; zero on a miss.
    pub consecutive: usize,
}

/// Per-call conditioning reuse. A hit denoises against the encoding frozen
/// at the last miss; a miss re-encodes the current observation.
pub fn prefix_cache_step<S: ConditionedSampler>(
    state: &mut CacheState<S::Encoded>,
    obs: &Observation,
    policy: &S,
    threshold: f64,
    max_consecutive: usize,
    seed: u64,
) -> Result<PrefixStep> {
    check_threshold(threshold)?;
    if max_consecutive == 0 {
        return Err(Error::arg("max_consecutive must be at least 1"));
    }
    let sig = signature(obs, SIGNATURE_BLOCK)?;
    let sim = state.similarity(&sig)?;
    let hit = state.payload.is_some() && state.consecutive < max_consecutive && sim.is_some_and(|s| s >= threshold);
    state.calls += 1;
    if hit {
        state.consecutive += 1;
        state.stats.record(true, sim, state.consecutive);
        let enc = state.payload.as_ref().expect("hit implies payload");
        return Ok(PrefixStep {
            chunk: policy.sample_encoded(enc, 0, seed)?,
            hit: true,
            sim,
            consecutive: state.consecutive,
        });
    }
    let enc = policy.encode_obs(obs)?;
    let chunk = policy.sample_encoded(&enc, 0, seed)?;
    state.payload = Some(enc);
    state.signature = Some(sig);
    state.consecutive = 0;
    state.stats.record(false, sim, 0);
    Ok(PrefixStep {
        chunk,
        hit: false,
        sim,
        consecutive: 0,
    })
}
