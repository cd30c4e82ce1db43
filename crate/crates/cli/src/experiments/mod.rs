//! The named experiments and the seeded driver that runs them.

mod common;
mod conformance;
mod contrastive;
mod dpo;
mod inference;
mod peft;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{Experiment, ExperimentConfig, CONFIG_VERSION};
use crate::error::{CliError, Result};
use crate::manifest::{scan_outputs, sha256_file, Manifest, CONFIG_FILE, MANIFEST_FILE, MANIFEST_VERSION, RESULTS_FILE};
use crate::results::{assemble, Record, Recorder, ResultsFile, SeedFailure};

type SeedRecords = (Option<u64>, Vec<Record>);

pub use common::seed_dir;
pub use dpo::{dpo_ar_seed, dpo_flow_seed, fit_ar, fit_flow, DpoSeedMetrics};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Work shared by every seed, done once before the seeds fan out.
enum Shared {
    Flow(vla_lab::flow::FlowPolicy),
    Ar(vla_lab::ar::ArPolicy),
    Peft(Vec<vla_lab::ar::ArPolicy>),
    Frames(vla_lab::contrastive::FrameSet),
    Nothing,
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(CliError::io(dir))?.next().is_some();
        if occupied {
            if !force {
                return Err(CliError::Usage(format!(
                    "{} is not empty; pass --force to replace a previous run",
                    dir.display()
                )));
            }
            if !dir.join(MANIFEST_FILE).exists() {
                return Err(CliError::Usage(format!(
                    "refusing to clear {}: it holds no {MANIFEST_FILE}",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(CliError::io(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn shared_stage(cfg: &ExperimentConfig, root: &Path) -> Result<Shared> {
    Ok(match cfg.experiment {
        Experiment::DpoFlow | Experiment::CacheBench => Shared::Flow(fit_flow(cfg, root)?),
        Experiment::DpoAr => Shared::Ar(fit_ar(cfg, cfg.section(&cfg.env, "env")?, root, "sft")?),
        Experiment::PeftAblation => Shared::Peft(peft::fit_suites(cfg, root)?),
        Experiment::Pretrain | Experiment::KnnEval => Shared::Frames(contrastive::frames(cfg)?),
        Experiment::LatencyAnatomy | Experiment::Conformance => Shared::Nothing,
    })
}

fn seed_stage(cfg: &ExperimentConfig, shared: &Shared, root: &Path, seed: u64) -> Result<Vec<Record>> {
    let dir = seed_dir(root, seed)?;
    let mut rec = Recorder::default();
    match (cfg.experiment, shared) {
        (Experiment::DpoFlow, Shared::Flow(p)) => {
            dpo_flow_seed(cfg, p, seed, &dir, &mut rec)?;
        }
        (Experiment::DpoAr, Shared::Ar(p)) => {
            dpo_ar_seed(cfg, p, seed, &dir, &mut rec)?;
        }
        (Experiment::PeftAblation, Shared::Peft(ps)) => peft::seed(cfg, ps, seed, &dir, &mut rec)?,
        (Experiment::Pretrain, Shared::Frames(f)) => {
            contrastive::pretrain_seed(cfg, f, seed, &dir, &mut rec)?;
        }
        (Experiment::KnnEval, Shared::Frames(f)) => contrastive::knn_seed(cfg, f, seed, &dir, &mut rec)?,
        (Experiment::CacheBench, Shared::Flow(p)) => inference::cache_seed(cfg, p, seed, &dir, &mut rec)?,
        (Experiment::Conformance, Shared::Nothing) => conformance::seed(cfg, seed, &dir, &mut rec)?,
        (e, _) => unreachable!("{e} has no seeded stage for this shared state"),
    }
    Ok(rec.records)
}

/// Runs `cfg` into its output directory and writes the manifest.
pub fn run(cfg: &ExperimentConfig, force: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let root = cfg.out_dir.clone();
    prepare_dir(&root, force)?;
    let config_path = root.join(CONFIG_FILE);
    let header = format!("# config version {CONFIG_VERSION}, resolved\n");
    fs::write(&config_path, header + &cfg.to_toml()?).map_err(CliError::io(&config_path))?;

    let shared = shared_stage(cfg, &root)?;
    let (per_seed, failures): (Vec<SeedRecords>, Vec<SeedFailure>) = if cfg.experiment.seeded() {
        let outcomes: Vec<(u64, Result<Vec<Record>>)> = cfg
            .seeds
            .par_iter()
            .map(|&s| (s, seed_stage(cfg, &shared, &root, s)))
            .collect();
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        for (seed, r) in outcomes {
            match r {
                Ok(records) => ok.push((Some(seed), records)),
                Err(e) => failed.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                }),
            }
        }
        (ok, failed)
    } else {
        let mut rec = Recorder::default();
        inference::latency(cfg, &root, &mut rec)?;
        (vec![(None, rec.records)], Vec::new())
    };

    let seeds = if cfg.experiment.seeded() { cfg.seeds.clone() } else { Vec::new() };
    let results = ResultsFile {
        experiment: cfg.experiment.name().to_owned(),
        seeds: seeds.clone(),
        failures: failures.clone(),
        tables: assemble(&per_seed),
    };
    common::write_json(&root.join(RESULTS_FILE), &results)?;
    let (_, config_sha256) = sha256_file(&config_path)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        experiment: cfg.experiment.name().to_owned(),
        seeds,
        config: CONFIG_FILE.to_owned(),
        config_sha256,
        failures,
        outputs: scan_outputs(&root)?,
    };
    manifest.write(&root)?;
    if !manifest.failures.is_empty() {
        return Err(CliError::Partial {
            failed: manifest.failures.len(),
            total: cfg.seeds.len(),
        });
    }
    Ok(RunOutcome { dir: root, manifest })
}
