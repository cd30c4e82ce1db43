//! Experiment configuration: per-experiment defaults, overlaid by an optional
//! TOML file and `section.key=value` overrides.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use vla_lab::contrastive::{ContrastiveConfig, SyntheticConfig};
use vla_lab::dpo::DpoConfig;
use vla_lab::inference::{CacheMode, ReachConfig, StageCostModel};
use vla_lab::peft::{AdapterConfig, AdapterMode};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_SEEDS: [u64; 3] = [42, 1337, 2026];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    DpoAr,
    DpoFlow,
    PeftAblation,
    Pretrain,
    KnnEval,
    LatencyAnatomy,
    CacheBench,
    Conformance,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::DpoAr,
        Experiment::DpoFlow,
        Experiment::PeftAblation,
        Experiment::Pretrain,
        Experiment::KnnEval,
        Experiment::LatencyAnatomy,
        Experiment::CacheBench,
        Experiment::Conformance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::DpoAr => "dpo-ar",
            Experiment::DpoFlow => "dpo-flow",
            Experiment::PeftAblation => "peft-ablation",
            Experiment::Pretrain => "pretrain",
            Experiment::KnnEval => "knn-eval",
            Experiment::LatencyAnatomy => "latency-anatomy",
            Experiment::CacheBench => "cache-bench",
            Experiment::Conformance => "conformance",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Experiment::DpoAr => "DPO on the autoregressive backbone with a DoRA adapter",
            Experiment::DpoFlow => "DPO on the flow backbone via the surrogate log-probability",
            Experiment::PeftAblation => "SFT vs +LoRA vs +DoRA success over reach-task suites",
            Experiment::Pretrain => "multi-view and temporal contrastive pretraining of the projection head",
            Experiment::KnnEval => "k-NN retrieval recall of pretrained, untrained and random embeddings",
            Experiment::LatencyAnatomy => "stage shares of one sample_actions call and speedup ceilings",
            Experiment::CacheBench => "chunk-level and prefix-level caching against the no-cache baseline",
            Experiment::Conformance => "policy contract checks on both backbones and both adapters",
        }
    }

    /// Whether the run repeats per seed.
    pub fn seeded(self) -> bool {
        self != Experiment::LatencyAnatomy
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
                CliError::Usage(format!("unknown experiment {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

/// Supervised pre-fitting of a backbone on expert demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    pub demos: usize,
    pub demo_seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub fit_seed: u64,
    pub init_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub hidden: usize,
    pub num_steps: usize,
    pub t_eval: usize,
    pub jitter: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArSection {
    pub hidden: usize,
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsSection {
    pub n_pairs: usize,
    pub heldout: usize,
    pub sigma_start: f64,
    pub sigma_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub trials: usize,
}

/// One reach-task variant of the adapter ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub name: String,
    pub eps: f64,
    pub workspace: f64,
    pub min_start_dist: f64,
    pub budget: usize,
}

impl SuiteSpec {
    pub fn env(&self, base: &ReachConfig) -> ReachConfig {
        ReachConfig {
            eps: self.eps,
            workspace: self.workspace,
            min_start_dist: self.min_start_dist,
            budget: self.budget,
            ..*base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftSection {
    pub modes: Vec<AdapterMode>,
    pub rank: usize,
    pub alpha: f64,
    pub suites: Vec<SuiteSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub mid: usize,
    pub emb: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub loss: ContrastiveConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnSection {
    pub ks: Vec<usize>,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySection {
    pub costs: StageCostModel,
    pub ceiling_fractions: Vec<f64>,
    /// Timed calls of the toy policy; reported on stdout only.
    pub timing_reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    pub trials: usize,
    pub gate: f64,
    pub costs: StageCostModel,
    pub strategies: Vec<CacheMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<ReachConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sft: Option<SftSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ar: Option<ArSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpo: Option<DpoConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PairsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peft: Option<PeftSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn: Option<KnnSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<CacheSection>,
}

fn flow_sft() -> SftSection {
    SftSection {
        demos: 4000,
        demo_seed: 1,
        steps: 4000,
        batch: 32,
        lr: 1e-3,
        fit_seed: 3,
        init_seed: 7,
    }
}

fn ar_sft() -> SftSection {
    SftSection {
        steps: 4000,
        batch: 16,
        ..flow_sft()
    }
}

fn flow_section(hidden: usize) -> FlowSection {
    FlowSection {
        hidden,
        num_steps: 10,
        t_eval: 4,
        jitter: true,
    }
}

fn ar_section() -> ArSection {
    ArSection {
        hidden: 128,
        bins: vla_lab::ar::DESK_BINS,
        lo: -1.0,
        hi: 1.0,
        temperature: 1.0,
    }
}

fn pairs_section() -> PairsSection {
    PairsSection {
        n_pairs: 200,
        heldout: 200,
        sigma_start: 0.1,
        sigma_end: 0.4,
    }
}

fn adapter(mode: AdapterMode) -> AdapterConfig {
    AdapterConfig {
        mode,
        rank: 4,
        alpha: 4.0,
        detach_norm: false,
    }
}

fn suites() -> Vec<SuiteSpec> {
    let spec = |name: &str, eps, workspace, min_start_dist, budget| SuiteSpec {
        name: name.to_owned(),
        eps,
        workspace,
        min_start_dist,
        budget,
    };
    vec![
        spec("spatial", 0.05, 0.5, 0.2, 60),
        spec("object", 0.03, 0.5, 0.2, 60),
        spec("goal", 0.05, 0.7, 0.3, 60),
        spec("long", 0.05, 0.7, 0.5, 60),
    ]
}

fn pretrain_section() -> PretrainSection {
    PretrainSection {
        mid: 128,
        emb: 64,
        epochs: 10,
        peak_lr: 3e-4,
        loss: ContrastiveConfig::default(),
    }
}

fn reduced_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        feat_dim: 128,
        ..SyntheticConfig::default()
    }
}

impl ExperimentConfig {
    /// Complete defaults; every accepted key appears here.
    pub fn defaults(experiment: Experiment) -> Self {
        let mut c = ExperimentConfig {
            version: CONFIG_VERSION,
            experiment,
            seeds: DEFAULT_SEEDS.to_vec(),
            out_dir: PathBuf::from("runs").join(experiment.name()),
            env: None,
            sft: None,
            flow: None,
            ar: None,
            adapter: None,
            dpo: None,
            pairs: None,
            eval: None,
            peft: None,
            synthetic: None,
            pretrain: None,
            knn: None,
            latency: None,
            cache: None,
        };
        match experiment {
            Experiment::DpoAr => {
                c.env = Some(ReachConfig::default());
                c.sft = Some(ar_sft());
                c.ar = Some(ar_section());
                c.adapter = Some(adapter(AdapterMode::Dora));
                c.dpo = Some(DpoConfig::default());
                c.pairs = Some(pairs_section());
                c.eval = Some(EvalSection { trials: 50 });
            }
            Experiment::DpoFlow => {
                c.env = Some(ReachConfig::default());
                c.sft = Some(flow_sft());
                c.flow = Some(flow_section(256));
                c.adapter = Some(adapter(AdapterMode::Lora));
                c.dpo = Some(DpoConfig::default());
                c.pairs = Some(pairs_section());
                c.eval = Some(EvalSection { trials: 50 });
            }
            Experiment::PeftAblation => {
                c.env = Some(ReachConfig::default());
                c.sft = Some(ar_sft());
                c.ar = Some(ar_section());
                c.dpo = Some(DpoConfig::default());
                c.pairs = Some(pairs_section());
                c.eval = Some(EvalSection { trials: 50 });
                c.peft = Some(PeftSection {
                    modes: vec![AdapterMode::Lora, AdapterMode::Dora],
                    rank: 4,
                    alpha: 4.0,
                    suites: suites(),
                });
            }
            Experiment::Pretrain => {
                c.synthetic = Some(reduced_synthetic());
                c.pretrain = Some(pretrain_section());
            }
            Experiment::KnnEval => {
                c.synthetic = Some(reduced_synthetic());
                c.pretrain = Some(pretrain_section());
                c.knn = Some(KnnSection {
                    ks: vec![1, 5, 10],
                    window: vla_lab::contrastive::DEFAULT_WINDOW,
                });
            }
            Experiment::LatencyAnatomy => {
                c.flow = Some(flow_section(64));
                c.env = Some(ReachConfig::default());
                c.latency = Some(LatencySection {
                    costs: StageCostModel::default(),
                    ceiling_fractions: vec![0.214, 0.786],
                    timing_reps: 200,
                });
            }
            Experiment::CacheBench => {
                c.env = Some(ReachConfig::default());
                c.sft = Some(SftSection {
                    steps: 3000,
                    ..flow_sft()
                });
                c.flow = Some(flow_section(64));
                let bench = vla_lab::inference::BenchConfig::default();
                c.cache = Some(CacheSection {
                    trials: bench.n_trials,
                    gate: bench.gate,
                    costs: bench.cost,
                    strategies: bench.strategies,
                });
            }
            Experiment::Conformance => {
                c.env = Some(ReachConfig::default());
                c.flow = Some(flow_section(16));
                c.ar = Some(ArSection {
                    hidden: 16,
                    ..ar_section()
                });
            }
        }
        c
    }

    /// Defaults for `experiment` (or the file's `experiment` key), overlaid
    /// by `file_text` and then by `overrides` of the form `a.b=value`.
    pub fn resolve(experiment: Option<Experiment>, file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut user = match file_text {
            Some(text) => text
                .parse::<Table>()
                .map_err(|e| CliError::Config(format!("cannot parse config: {e}")))?,
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let from_file = match user.get("experiment") {
            Some(Value::String(s)) => Some(s.parse::<Experiment>()?),
            Some(other) => return Err(CliError::Config(format!("experiment must be a string, got {other}"))),
            None => None,
        };
        let experiment = match (experiment, from_file) {
            (Some(a), Some(b)) if a != b => {
                return Err(CliError::Usage(format!("command line names {a} but the config names {b}")))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(CliError::Usage("no experiment named".into())),
        };
        if let Some(v) = user.get("version") {
            if v.as_integer() != Some(i64::from(CONFIG_VERSION)) {
                return Err(CliError::Config(format!(
                    "unsupported config version {v}; this build reads version {CONFIG_VERSION}"
                )));
            }
        }
        let defaults = Value::try_from(Self::defaults(experiment))
            .map_err(|e| CliError::Config(format!("cannot encode defaults: {e}")))?;
        let Value::Table(mut merged) = defaults else {
            unreachable!("config serializes to a table")
        };
        check_keys(&merged, &user, "")?;
        merge(&mut merged, user);
        let cfg: ExperimentConfig = Value::Table(merged)
            .try_into()
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        let bad = |what: &str| Err(CliError::Config(what.to_owned()));
        if let Some(env) = &self.env {
            env.validate()?;
        }
        if let Some(d) = &self.dpo {
            d.validate()?;
        }
        if let Some(s) = &self.sft {
            if s.demos == 0 || s.batch == 0 || s.lr.is_nan() || s.lr < 0.0 {
                return bad("sft needs demos and batch ≥ 1 and lr ≥ 0");
            }
        }
        if let Some(p) = &self.pairs {
            if p.n_pairs == 0 || p.heldout == 0 || !(p.sigma_start > 0.0 && p.sigma_start <= p.sigma_end) {
                return bad("pairs need n_pairs, heldout ≥ 1 and 0 < sigma_start ≤ sigma_end");
            }
        }
        if let Some(e) = &self.eval {
            if e.trials == 0 {
                return bad("eval.trials must be positive");
            }
        }
        if let Some(p) = &self.peft {
            if p.modes.is_empty() || p.suites.is_empty() || p.rank == 0 {
                return bad("peft needs at least one mode and suite, and rank ≥ 1");
            }
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if let Some(p) = &self.pretrain {
            p.loss.validate()?;
            if p.mid == 0 || p.emb == 0 {
                return bad("pretrain head widths must be positive");
            }
            if let Some(s) = &self.synthetic {
                if s.temporal_offset != p.loss.delta {
                    return bad("synthetic.temporal_offset must equal pretrain.loss.delta");
                }
            }
        }
        if let Some(k) = &self.knn {
            if k.ks.is_empty() || k.ks.contains(&0) {
                return bad("knn.ks must be non-empty and positive");
            }
        }
        if let Some(l) = &self.latency {
            l.costs.validate()?;
        }
        if let Some(c) = &self.cache {
            c.costs.validate()?;
            if c.trials == 0 {
                return bad("cache.trials must be positive");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot encode config: {e}")))
    }

    /// Accessor for sections the experiment's defaults always provide.
    pub fn section<'a, T>(&self, value: &'a Option<T>, name: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("{} requires a [{name}] section", self.experiment)))
    }
}

fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("override {spec:?} has an empty key")));
    }
    let raw = raw.trim();
    // Parse as a TOML value; bare words fall back to strings.
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut cursor = table;
    for k in parents {
        let entry = cursor.entry((*k).to_owned()).or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {spec:?}: {k} is not a section")))?;
    }
    cursor.insert((*last).to_owned(), value);
    Ok(())
}

/// Rejects keys that the defaults do not define. Arrays are replaced whole.
fn check_keys(defaults: &Table, user: &Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (defaults.get(k), v) {
            (None, _) => {
                return Err(CliError::Config(format!("unknown or unused key {path:?} for this experiment")))
            }
            (Some(Value::Table(d)), Value::Table(u)) => check_keys(d, u, &path)?,
            (Some(Value::Table(_)), _) => return Err(CliError::Config(format!("{path:?} must be a table"))),
            _ => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
