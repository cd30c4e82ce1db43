use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vla_lab::inference::{rollout_suite, CacheMode, ReachConfig, ReachEnv, StageCostModel};
use vla_lab::numkit::{checkpoint_save, RngState, TensorMap};
use vla_lab::policy::{ActionChunk, ConditionedSampler, Observation};

use crate::error::{CliError, Result};

pub fn seed_dir(root: &Path, seed: u64) -> Result<PathBuf> {
    let dir = root.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    Ok(dir)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_owned(),
        source,
    })?;
    write_text(path, &(text + "\n"))
}

/// CSV with a header row; every field is already formatted.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn save_checkpoint(path: &Path, map: &TensorMap) -> Result<()> {
    Ok(checkpoint_save(map, path)?)
}

pub fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l}").expect("string write");
    }
    write_text(path, &out)
}

/// Draws `(observation, expert chunk)` pairs from the scripted controller.
pub fn expert_source(env: ReachConfig) -> impl Fn(&mut RngState) -> vla_lab::Result<(Observation, ActionChunk)> + Sync {
    move |rng| {
        let mut e = ReachEnv::new(env)?;
        Ok(e.expert_sample(rng))
    }
}

/// Cache-free closed-loop success over `trials` episodes.
pub fn success<S: ConditionedSampler>(policy: &S, env: &ReachConfig, trials: usize, seed: u64) -> Result<(u64, u64)> {
    let r = rollout_suite(policy, env, CacheMode::None, trials, &StageCostModel::default(), seed)?;
    Ok((r.successes as u64, r.trials as u64))
}
