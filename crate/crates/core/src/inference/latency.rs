//! Stage-cost model of one `sample_actions` call.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCostModel {
    pub preprocess_ms: f64,
    pub prefix_ms: f64,
    pub per_denoise_step_ms: f64,
    pub denoise_steps: usize,
    /// Charged once per cache decision.
    pub cache_check_overhead_ms: f64,
}

impl Default for StageCostModel {
    fn default() -> Self {
        Self {
            preprocess_ms: 5.0,
            prefix_ms: 60.0,
            per_denoise_step_ms: 22.0,
            denoise_steps: 10,
            cache_check_overhead_ms: 75.0,
        }
    }
}

impl StageCostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.preprocess_ms,
            self.prefix_ms,
            self.per_denoise_step_ms,
            self.cache_check_overhead_ms,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("stage costs must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn denoise_ms(&self) -> f64 {
        self.per_denoise_step_ms * self.denoise_steps as f64
    }

    /// A full call.
    pub fn call_ms(&self) -> f64 {
        self.preprocess_ms + self.prefix_ms + self.denoise_ms()
    }

    /// A call that reuses the cached prefix.
    pub fn prefix_hit_ms(&self) -> f64 {
        self.preprocess_ms + self.denoise_ms()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageShare {
    pub stage: String,
    pub ms: f64,
    /// Percent of the whole call.
    pub share_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub stages: Vec<StageShare>,
    pub total_ms: f64,
    /// Prefix share of the model forward (prefix + denoise), in percent.
    pub prefix_forward_pct: f64,
    /// Denoise share of the model forward, in percent.
    pub denoise_forward_pct: f64,
    /// Wall-clock of the toy implementation, if measured.
    pub measured_ms: Option<f64>,
}

pub const STAGE_PREPROCESS: &str = "preprocess";
pub const STAGE_PREFIX: &str = "prefix";
pub const STAGE_DENOISE: &str = "denoise";

impl LatencyProfile {
    pub fn share(&self, stage: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.share_pct)
    }

    pub fn with_measurement(mut self, ms: f64) -> Self {
        self.measured_ms = Some(ms);
        self
    }
}

pub fn profile_sample_actions(model: &StageCostModel) -> Result<LatencyProfile> {
    model.validate()?;
    let parts = [
        (STAGE_PREPROCESS, model.preprocess_ms),
        (STAGE_PREFIX, model.prefix_ms),
        (STAGE_DENOISE, model.denoise_ms()),
    ];
    let total: f64 = parts.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return Err(Error::arg("total stage cost is zero"));
    }
    let forward = model.prefix_ms + model.denoise_ms();
    let pct = |v: f64, of: f64| if of > 0.0 { 100.0 * v / of } else { 0.0 };
    Ok(LatencyProfile {
        stages: parts
            .iter()
            .map(|&(stage, ms)| StageShare {
                stage: stage.to_owned(),
                ms,
                share_pct: pct(ms, total),
            })
            .collect(),
        total_ms: total,
        prefix_forward_pct: pct(model.prefix_ms, forward),
        denoise_forward_pct: pct(model.denoise_ms(), forward),
        measured_ms: None,
    })
}

/// Upper bound on speedup from removing `fraction` of the cost entirely.
pub fn speedup_ceiling(fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::arg(format!("cached fraction {fraction} must lie in [0, 1)")));
    }
    Ok(1.0 / (1.0 - fraction))
}

/// Mean wall-clock milliseconds of `f` over `reps` calls.
pub fn measure_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    let reps = reps.max(1);
    let start = Instant::now();
    for _ in 0..reps {
        f();
    }
    start.elapsed().as_secs_f64() * 1e3 / reps as f64
}
