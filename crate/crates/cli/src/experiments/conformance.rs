//! Contract checks for both backbones with each adapter kind.

use std::path::Path;

use vla_lab::ar::ArPolicy;
use vla_lab::flow::FlowPolicy;
use vla_lab::numkit::derive_seed;
use vla_lab::peft::{AdapterConfig, AdapterMode};
use vla_lab::policy::{conformance_suite, ConformanceReport, TrainablePolicy};

use super::common::write_json;
use super::dpo::{ar_config, flow_config};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::results::Recorder;

fn adapter(mode: AdapterMode) -> AdapterConfig {
    AdapterConfig {
        mode,
        rank: 2,
        alpha: 2.0,
        detach_norm: false,
    }
}

fn check<P: TrainablePolicy>(
    mut p: P,
    attach: impl Fn(&mut P, AdapterConfig, u64) -> vla_lab::Result<()>,
    mode: AdapterMode,
    seed: u64,
) -> Result<ConformanceReport> {
    attach(&mut p, adapter(mode), derive_seed(seed, 1))?;
    p.snapshot_reference();
    Ok(conformance_suite(&p, derive_seed(seed, 2)))
}

pub fn seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let env = cfg.section(&cfg.env, "env")?;
    let mut out = Vec::new();
    for mode in [AdapterMode::Lora, AdapterMode::Dora] {
        let flow = FlowPolicy::new(flow_config(env, cfg)?, derive_seed(seed, 0))?;
        let ar = ArPolicy::new(ar_config(env, cfg)?, derive_seed(seed, 0))?;
        let reports = [
            ("flow", check(flow, FlowPolicy::attach_adapters, mode, seed)?),
            ("ar", check(ar, ArPolicy::attach_adapters, mode, seed)?),
        ];
        for (backbone, report) in reports {
            let row = format!("{backbone}+{mode}");
            let passed = report.checks.iter().filter(|c| c.passed).count();
            rec.count("conformance", &row, "checks passed", passed as u64, report.checks.len() as u64);
            out.push(serde_json::json!({ "policy": row, "report": report }));
        }
    }
    write_json(&dir.join("conformance.json"), &out)
}
