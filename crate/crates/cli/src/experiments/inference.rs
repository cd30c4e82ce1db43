//! Latency anatomy and the caching benchmark.

use std::path::Path;

use vla_lab::flow::FlowPolicy;
use vla_lab::inference::latency::measure_ms;
use vla_lab::inference::{cache_benchmark, profile_sample_actions, speedup_ceiling, BenchConfig, SuiteResult};
use vla_lab::numkit::{derive_seed, RngState};
use vla_lab::policy::{Observation, Policy};

use super::common::{write_csv, write_json};
use super::dpo::flow_config;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::results::Recorder;

const BENCH_STREAM: u64 = 0;

fn record_suite(rec: &mut Recorder, r: &SuiteResult) {
    let row = r.mode.label();
    rec.count("cache", &row, "success", r.successes as u64, r.trials as u64);
    rec.value("cache", &row, "modeled s", r.modeled_ms / 1e3);
    rec.value("cache", &row, "hit rate", r.cache.hit_rate);
    rec.value("cache", &row, "mean deviation", r.mean_deviation);
}

pub fn cache_seed(cfg: &ExperimentConfig, policy: &FlowPolicy, seed: u64, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let c = cfg.section(&cfg.cache, "cache")?;
    let bench = BenchConfig {
        env: *cfg.section(&cfg.env, "env")?,
        cost: c.costs,
        n_trials: c.trials,
        seed: derive_seed(seed, BENCH_STREAM),
        gate: c.gate,
        strategies: c.strategies.clone(),
    };
    let report = cache_benchmark(policy, &bench)?;
    write_json(&dir.join("cache_bench.json"), &report)?;
    let rows = std::iter::once(&report.baseline)
        .chain(&report.strategies)
        .flat_map(|r| {
            r.deviation_by_reuse.iter().map(move |b| {
                vec![r.mode.label(), b.consecutive.to_string(), b.mean_deviation.to_string(), b.count.to_string()]
            })
        });
    write_csv(&dir.join("deviation.csv"), &["mode", "consecutive", "mean_deviation", "count"], rows)?;
    record_suite(rec, &report.baseline);
    for r in &report.strategies {
        record_suite(rec, r);
    }
    Ok(())
}

/// Modeled stage shares; the wall-clock timing of a toy policy is printed only,
/// so the run directory stays deterministic.
pub fn latency(cfg: &ExperimentConfig, root: &Path, rec: &mut Recorder) -> Result<()> {
    let l = cfg.section(&cfg.latency, "latency")?;
    let env = cfg.section(&cfg.env, "env")?;
    let profile = profile_sample_actions(&l.costs)?;
    let ceilings = l
        .ceiling_fractions
        .iter()
        .map(|&f| Ok((f, speedup_ceiling(f)?)))
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &root.join("latency.json"),
        &serde_json::json!({
            "costs": l.costs,
            "profile": profile,
            "ceilings": ceilings.iter().map(|(f, s)| serde_json::json!({ "fraction": f, "speedup": s })).collect::<Vec<_>>(),
        }),
    )?;
    write_csv(
        &root.join("stages.csv"),
        &["stage", "ms", "share_pct"],
        profile
            .stages
            .iter()
            .map(|s| vec![s.stage.clone(), s.ms.to_string(), s.share_pct.to_string()]),
    )?;
    write_csv(
        &root.join("ceilings.csv"),
        &["fraction", "speedup"],
        ceilings.iter().map(|(f, s)| vec![f.to_string(), s.to_string()]),
    )?;
    for s in &profile.stages {
        rec.value("stages", &s.stage, "ms", s.ms);
        rec.value("stages", &s.stage, "% of call", s.share_pct);
    }
    rec.value("forward split", "prefix", "% of forward", profile.prefix_forward_pct);
    rec.value("forward split", "denoise", "% of forward", profile.denoise_forward_pct);
    for (f, s) in &ceilings {
        rec.value("speedup ceiling", &format!("{:.1}% cached", 100.0 * f), "x", *s);
    }

    let toy = FlowPolicy::new(flow_config(env, cfg)?, 0)?;
    let obs = Observation::random(toy.obs_dims(), &mut RngState::new(0));
    let steps = toy.config().num_steps;
    let mut k = 0u64;
    let ms = measure_ms(l.timing_reps, || {
        let _ = toy.sample_actions(&obs, steps, k);
        k += 1;
    });
    println!(
        "measured: toy flow policy sample_actions {ms:.3} ms/call over {} calls (modeled call {:.1} ms)",
        l.timing_reps, profile.total_ms
    );
    Ok(())
}
