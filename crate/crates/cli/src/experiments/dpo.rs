//! Preference training on either backbone.

use std::path::Path;

use serde::Serialize;
use vla_lab::ar::{ArConfig, ArPolicy};
use vla_lab::dpo::{evaluate_margins, generate_pairs, positive_fraction, save_pairs, train_dpo, PairGenConfig, PreferencePair};
use vla_lab::flow::{FlowConfig, FlowPolicy, SurrogateConfig};
use vla_lab::inference::{expert_demos, ReachConfig};
use vla_lab::nn::FitConfig;
use vla_lab::numkit::{derive_seed, TensorMap};
use vla_lab::peft::AdapterConfig;
use vla_lab::policy::{ConditionedSampler, TrainablePolicy};

use super::common::{expert_source, save_checkpoint, success, write_csv, write_json, write_loss_curve};
use crate::config::{ExperimentConfig, SftSection};
use crate::error::{CliError, Result};
use crate::results::Recorder;

/// Seed streams of one DPO run, split off the run seed.
const ADAPTER_STREAM: u64 = 0;
const TRAIN_PAIRS_STREAM: u64 = 1;
const HELDOUT_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;
const ROLLOUT_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpoSeedMetrics {
    pub seed: u64,
    pub steps: usize,
    pub loss_first: f64,
    pub loss_last: f64,
    pub tail_margin: f64,
    pub heldout_positive: f64,
    pub train_positive: f64,
    pub sft_success: (u64, u64),
    pub dpo_success: (u64, u64),
}

fn fit_config(s: &SftSection) -> FitConfig {
    FitConfig {
        steps: s.steps,
        batch: s.batch,
        lr: s.lr,
        seed: s.fit_seed,
    }
}

pub fn flow_config(env: &ReachConfig, cfg: &ExperimentConfig) -> Result<FlowConfig> {
    let f = cfg.section(&cfg.flow, "flow")?;
    Ok(FlowConfig {
        obs: env.obs,
        chunk: env.chunk,
        hidden: f.hidden,
        num_steps: f.num_steps,
        surrogate: SurrogateConfig {
            t_eval: f.t_eval,
            jitter: f.jitter,
            noise_seed: 0,
        },
    })
}

pub fn ar_config(env: &ReachConfig, cfg: &ExperimentConfig) -> Result<ArConfig> {
    let a = cfg.section(&cfg.ar, "ar")?;
    Ok(ArConfig {
        obs: env.obs,
        chunk: env.chunk,
        hidden: a.hidden,
        bins: a.bins,
        lo: a.lo,
        hi: a.hi,
        temperature: a.temperature,
    })
}

/// Flow-matching SFT on expert demonstrations; writes `sft_loss.csv` and `sft.ckpt`.
pub fn fit_flow(cfg: &ExperimentConfig, root: &Path) -> Result<FlowPolicy> {
    let env = cfg.section(&cfg.env, "env")?;
    let sft = cfg.section(&cfg.sft, "sft")?;
    let mut policy = FlowPolicy::new(flow_config(env, cfg)?, sft.init_seed)?;
    let demos = expert_demos(env, sft.demos, sft.demo_seed)?;
    let losses = policy.fit(&demos, &fit_config(sft))?;
    write_loss_curve(&root.join("sft_loss.csv"), &losses)?;
    save_checkpoint(&root.join("sft.ckpt"), &policy.export())?;
    Ok(policy)
}

/// Teacher-forced SFT of the token backbone on `env`'s expert.
pub fn fit_ar(cfg: &ExperimentConfig, env: &ReachConfig, root: &Path, name: &str) -> Result<ArPolicy> {
    let sft = cfg.section(&cfg.sft, "sft")?;
    let mut policy = ArPolicy::new(ar_config(env, cfg)?, sft.init_seed)?;
    let demos = expert_demos(env, sft.demos, sft.demo_seed)?;
    let losses = policy.fit(&demos, &fit_config(sft))?;
    write_loss_curve(&root.join(format!("{name}_loss.csv")), &losses)?;
    save_checkpoint(&root.join(format!("{name}.ckpt")), &policy.export())?;
    Ok(policy)
}

pub(super) fn pair_sets(cfg: &ExperimentConfig, env: &ReachConfig, seed: u64) -> Result<(Vec<PreferencePair>, Vec<PreferencePair>)> {
    let p = cfg.section(&cfg.pairs, "pairs")?;
    let gen = |n, stream| {
        generate_pairs(
            expert_source(*env),
            &PairGenConfig {
                n_pairs: n,
                sigma_start: p.sigma_start,
                sigma_end: p.sigma_end,
                seed: derive_seed(seed, stream),
            },
        )
    };
    Ok((gen(p.n_pairs, TRAIN_PAIRS_STREAM)?, gen(p.heldout, HELDOUT_STREAM)?))
}

pub(super) struct Round<P> {
    pub policy: P,
    pub log: vla_lab::dpo::TrainLog,
    pub train: Vec<PreferencePair>,
    pub held: Vec<PreferencePair>,
    pub train_margins: Vec<f64>,
    pub held_margins: Vec<f64>,
}

/// Attaches fresh adapters to a copy of `base`, trains, and scores it.
pub(super) fn preference_round<P, A>(
    cfg: &ExperimentConfig,
    env: &ReachConfig,
    base: &P,
    adapter: AdapterConfig,
    attach: A,
    seed: u64,
) -> Result<Round<P>>
where
    P: TrainablePolicy + ConditionedSampler,
    A: Fn(&mut P, AdapterConfig, u64) -> vla_lab::Result<()>,
{
    let dpo = cfg.section(&cfg.dpo, "dpo")?;
    let mut policy = base.clone();
    attach(&mut policy, adapter, derive_seed(seed, ADAPTER_STREAM))?;
    policy.snapshot_reference();
    let (train, held) = pair_sets(cfg, env, seed)?;
    let log = train_dpo(&mut policy, &train, dpo, derive_seed(seed, SHUFFLE_STREAM))?;
    let train_margins = evaluate_margins(&policy, &train)?;
    let held_margins = evaluate_margins(&policy, &held)?;
    Ok(Round {
        policy,
        log,
        train,
        held,
        train_margins,
        held_margins,
    })
}

pub(super) fn rollout_seed(seed: u64) -> u64 {
    derive_seed(seed, ROLLOUT_STREAM)
}

#[allow(clippy::too_many_arguments)]
fn dpo_seed<P, A>(
    cfg: &ExperimentConfig,
    base: &P,
    attach: A,
    export: impl Fn(&P) -> TensorMap,
    label: &str,
    seed: u64,
    dir: &Path,
    rec: &mut Recorder,
) -> Result<DpoSeedMetrics>
where
    P: TrainablePolicy + ConditionedSampler,
    A: Fn(&mut P, AdapterConfig, u64) -> vla_lab::Result<()>,
{
    let env = cfg.section(&cfg.env, "env")?;
    let adapter = *cfg.section(&cfg.adapter, "adapter")?;
    let trials = cfg.section(&cfg.eval, "eval")?.trials;
    let Round {
        policy,
        log,
        train,
        held,
        train_margins: train_m,
        held_margins: held_m,
    } = preference_round(cfg, env, base, adapter, attach, seed)?;

    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    super::common::write_text(&dir.join("train_log.csv"), &String::from_utf8(csv).expect("ascii csv"))?;
    let rows = [("train", &train, &train_m), ("heldout", &held, &held_m)]
        .into_iter()
        .flat_map(|(split, pairs, margins)| {
            pairs
                .iter()
                .zip(margins.iter())
                .enumerate()
                .map(move |(i, (p, m))| vec![split.to_owned(), i.to_string(), p.sigma.to_string(), m.to_string()])
        });
    write_csv(&dir.join("margins.csv"), &["split", "index", "sigma", "margin"], rows)?;
    save_pairs(&train, dir.join("pairs.ckpt"), dir.join("pairs.jsonl"))?;
    save_checkpoint(&dir.join("policy.ckpt"), &export(&policy))?;

    let sft_success = success(base, env, trials, rollout_seed(seed))?;
    let dpo_success = success(&policy, env, trials, rollout_seed(seed))?;
    let last = *log.loss.last().ok_or_else(|| CliError::Config("dpo ran zero steps".into()))?;
    let m = DpoSeedMetrics {
        seed,
        steps: log.len(),
        loss_first: log.loss[0],
        loss_last: last,
        tail_margin: log.tail_margin(50),
        heldout_positive: positive_fraction(&held_m),
        train_positive: positive_fraction(&train_m),
        sft_success,
        dpo_success,
    };
    write_json(&dir.join("metrics.json"), &m)?;

    rec.value("dpo", label, "tail margin", m.tail_margin);
    rec.value("dpo", label, "held-out positive", m.heldout_positive);
    rec.value("dpo", label, "train positive", m.train_positive);
    rec.value("dpo", label, "final loss", m.loss_last);
    rec.count("success", label, "SFT", sft_success.0, sft_success.1);
    rec.count("success", label, "+DPO", dpo_success.0, dpo_success.1);
    Ok(m)
}

pub fn dpo_flow_seed(cfg: &ExperimentConfig, base: &FlowPolicy, seed: u64, dir: &Path, rec: &mut Recorder) -> Result<DpoSeedMetrics> {
    let label = format!("flow+{}", cfg.section(&cfg.adapter, "adapter")?.mode);
    dpo_seed(cfg, base, FlowPolicy::attach_adapters, FlowPolicy::export, &label, seed, dir, rec)
}

pub fn dpo_ar_seed(cfg: &ExperimentConfig, base: &ArPolicy, seed: u64, dir: &Path, rec: &mut Recorder) -> Result<DpoSeedMetrics> {
    let label = format!("ar+{}", cfg.section(&cfg.adapter, "adapter")?.mode);
    dpo_seed(cfg, base, ArPolicy::attach_adapters, ArPolicy::export, &label, seed, dir, rec)
}
