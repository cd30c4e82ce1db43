//! SFT against +LoRA and +DoRA preference training, per reach-task suite.

use std::path::Path;

use rayon::prelude::*;

use vla_lab::ar::ArPolicy;
use vla_lab::peft::{AdapterConfig, AdapterMode};

use super::common::{success, write_json};
use super::dpo::{fit_ar, preference_round, rollout_seed, Round};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::results::Recorder;

pub const TABLE: &str = "suite success";

fn column(mode: AdapterMode) -> &'static str {
    match mode {
        AdapterMode::Lora => "+LoRA",
        AdapterMode::Dora => "+DoRA",
    }
}

/// One SFT checkpoint per suite, reused by every seed.
pub fn fit_suites(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<ArPolicy>> {
    let base = cfg.section(&cfg.env, "env")?;
    let peft = cfg.section(&cfg.peft, "peft")?;
    peft.suites
        .par_iter()
        .map(|s| fit_ar(cfg, &s.env(base), root, &format!("sft-{}", s.name)))
        .collect()
}

pub fn seed(cfg: &ExperimentConfig, sft: &[ArPolicy], seed: u64, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let base = cfg.section(&cfg.env, "env")?;
    let peft = cfg.section(&cfg.peft, "peft")?;
    let trials = cfg.section(&cfg.eval, "eval")?.trials;
    let mut summary = Vec::new();
    for (suite, policy) in peft.suites.iter().zip(sft) {
        let env = suite.env(base);
        let s = success(policy, &env, trials, rollout_seed(seed))?;
        rec.count(TABLE, &suite.name, "SFT", s.0, s.1);
        summary.push((suite.name.clone(), "sft".to_owned(), s, f64::NAN));
        for &mode in &peft.modes {
            let adapter = AdapterConfig {
                mode,
                rank: peft.rank,
                alpha: peft.alpha,
                detach_norm: false,
            };
            let Round { policy: tuned, log, .. } = preference_round(cfg, &env, policy, adapter, ArPolicy::attach_adapters, seed)?;
            let s = success(&tuned, &env, trials, rollout_seed(seed))?;
            rec.count(TABLE, &suite.name, column(mode), s.0, s.1);
            summary.push((suite.name.clone(), mode.to_string(), s, log.tail_margin(50)));
        }
    }
    let rows: Vec<_> = summary
        .into_iter()
        .map(|(suite, column, (successes, trials), tail_margin)| {
            serde_json::json!({
                "suite": suite,
                "column": column,
                "successes": successes,
                "trials": trials,
                "tail_margin": if tail_margin.is_nan() { None } else { Some(tail_margin) },
            })
        })
        .collect();
    write_json(&dir.join("cells.json"), &rows)
}
