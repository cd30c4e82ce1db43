use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vla_lab_cli::config::{Experiment, ExperimentConfig};
use vla_lab_cli::error::{CliError, Result};
use vla_lab_cli::experiments;
use vla_lab_cli::report;

#[derive(Parser)]
#[command(name = "vlab", version, about = "Seeded experiment runner for vla-lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment into a fresh output directory.
    Run {
        /// Experiment name; may instead come from the config file.
        experiment: Option<Experiment>,
        /// TOML file layered over the experiment's defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds, replacing the configured list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override one key, e.g. `--set dpo.max_steps=100`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Verify a run directory and print its pooled tables.
    Report { dir: PathBuf },
    /// List experiment names.
    ListExperiments,
}

fn run(
    experiment: Option<Experiment>,
    config: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    overrides: Vec<String>,
    force: bool,
) -> Result<()> {
    let text = match &config {
        Some(p) => Some(fs::read_to_string(p).map_err(CliError::io(p))?),
        None => None,
    };
    let mut cfg = ExperimentConfig::resolve(experiment, text.as_deref(), &overrides)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let outcome = experiments::run(&cfg, force);
    match &outcome {
        Ok(o) => {
            println!("{} complete: {} ({} outputs)", cfg.experiment, o.dir.display(), o.manifest.outputs.len());
            print!("{}", report::report(&o.dir)?.text);
        }
        Err(CliError::Partial { .. }) => {
            if let Ok(r) = report::report(&cfg.out_dir) {
                print!("{}", r.text);
            }
        }
        Err(_) => {}
    }
    outcome.map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            experiment,
            config,
            seeds,
            out,
            overrides,
            force,
        } => run(experiment, config, seeds, out, overrides, force),
        Command::Report { dir } => report::report(&dir).map(|r| print!("{}", r.text)),
        Command::ListExperiments => {
            for e in Experiment::ALL {
                println!("{:<16} {}", e.name(), e.summary());
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
