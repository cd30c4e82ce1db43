//! Synthetic two-camera frames with task, episode and temporal structure,
//! standing in for frozen vision-encoder features.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{derive_seed, Matrix, RngState};

const DRIFT_BASIS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub suites: usize,
    pub tasks_per_suite: usize,
    pub episodes_per_task: usize,
    pub anchors_per_episode: usize,
    pub episode_len: usize,
    pub feat_dim: usize,
    pub latent_dim: usize,
    /// Offset of the future agent view used for temporal pairs.
    pub temporal_offset: usize,
    /// Norm of the feature offset shared by every frame. Frozen encoders put
    /// most feature energy in such a shared direction, which is what keeps an
    /// untrained head near the chance-level loss.
    pub common_scale: f64,
    /// Weight of the suite code inside each task code.
    pub suite_share: f64,
    pub episode_scale: f64,
    pub drift_scale: f64,
    /// Amplitude of the per-frame brightness gain around 1.
    pub gain_amp: f64,
    pub agent_noise: f64,
    pub wrist_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            suites: 4,
            tasks_per_suite: 10,
            episodes_per_task: 5,
            anchors_per_episode: 30,
            episode_len: 60,
            feat_dim: 1152,
            latent_dim: 16,
            temporal_offset: 5,
            common_scale: 10.0,
            suite_share: 0.5,
            episode_scale: 0.35,
            drift_scale: 0.5,
            gain_amp: 0.2,
            agent_noise: 0.1,
            wrist_noise: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.suites,
            self.tasks_per_suite,
            self.episodes_per_task,
            self.anchors_per_episode,
            self.feat_dim,
            self.latent_dim,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(format!("synthetic counts must be at least 1: {self:?}")));
        }
        if self.anchors_per_episode > self.episode_len {
            return Err(Error::Config(format!(
                "{} anchors do not fit in an episode of {} steps",
                self.anchors_per_episode, self.episode_len
            )));
        }
        let scales = [
            self.common_scale,
            self.suite_share,
            self.episode_scale,
            self.drift_scale,
            self.gain_amp,
            self.agent_noise,
            self.wrist_noise,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || self.gain_amp >= 1.0 {
            return Err(Error::Config(format!("synthetic scales out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.suites * self.tasks_per_suite * self.episodes_per_task * self.anchors_per_episode
    }
}

/// Retrieval labels of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameLabel {
    pub suite: usize,
    pub task: usize,
    pub episode: usize,
    pub t: usize,
}

impl FrameLabel {
    pub fn same_task(&self, other: &Self) -> bool {
        self.suite == other.suite && self.task == other.task
    }

    pub fn same_episode(&self, other: &Self) -> bool {
        self.same_task(other) && self.episode == other.episode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub label: FrameLabel,
    pub agent: Vec<f64>,
    pub wrist: Vec<f64>,
    /// Agent view `temporal_offset` steps later; absent near the episode end.
    pub future_agent: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FrameSet {
    pub config: SyntheticConfig,
    pub records: Vec<FrameRecord>,
}

impl FrameSet {
    pub fn labels(&self) -> Vec<FrameLabel> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone)]
struct EpisodeParams {
    offset: Vec<f64>,
    drift: Matrix,
    phases: [f64; 3],
}

/// Fixed generative model: codes, camera maps and per-episode dynamics.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    config: SyntheticConfig,
    common: Vec<f64>,
    agent_map: Matrix,
    wrist_map: Matrix,
    task_codes: Vec<Vec<f64>>,
    episodes: Vec<EpisodeParams>,
}

fn unit_gaussian(rng: &mut RngState, n: usize) -> Vec<f64> {
    let v = rng.gaussian_vec(n);
    let s = crate::numkit::norm(&v).max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / s).collect()
}

impl SyntheticWorld {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(config.seed);
        let (f, l) = (config.feat_dim, config.latent_dim);
        let common: Vec<f64> = unit_gaussian(&mut rng, f).into_iter().map(|v| v * config.common_scale).collect();
        let map_std = 1.0 / (f as f64).sqrt();
        let agent_map = Matrix::random_normal(f, l, map_std, &mut rng);
        let wrist_map = Matrix::random_normal(f, l, map_std, &mut rng);
        let suite_codes: Vec<Vec<f64>> = (0..config.suites).map(|_| unit_gaussian(&mut rng, l)).collect();
        let mut task_codes = Vec::new();
        for suite in &suite_codes {
            for _ in 0..config.tasks_per_suite {
                let own = unit_gaussian(&mut rng, l);
                let w = config.suite_share;
                task_codes.push(suite.iter().zip(&own).map(|(s, o)| w * s + (1.0 - w) * o).collect());
            }
        }
        let episodes = (0..task_codes.len() * config.episodes_per_task)
            .map(|_| EpisodeParams {
                offset: unit_gaussian(&mut rng, l),
                drift: Matrix::random_normal(l, DRIFT_BASIS, 1.0 / (DRIFT_BASIS as f64 * l as f64).sqrt(), &mut rng),
                phases: [rng.uniform() * TAU, rng.uniform() * TAU, rng.uniform() * TAU],
            })
            .collect();
        Ok(Self {
            config,
            common,
            agent_map,
            wrist_map,
            task_codes,
            episodes,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    fn task_index(&self, label: &FrameLabel) -> usize {
        label.suite * self.config.tasks_per_suite + label.task
    }

    /// Noise-free latent state; `gain · code + episode offset + drift(t)`.
    pub fn latent(&self, label: &FrameLabel) -> Vec<f64> {
        let c = &self.config;
        let task = self.task_index(label);
        let ep = &self.episodes[task * c.episodes_per_task + label.episode];
        let w = TAU * label.t as f64 / c.episode_len.max(1) as f64;
        let gain = 1.0 + c.gain_amp * (w + ep.phases[0]).sin();
        let basis = [
            (w + ep.phases[1]).sin(),
            (w + ep.phases[1]).cos(),
            (2.0 * w + ep.phases[2]).sin(),
            (2.0 * w + ep.phases[2]).cos(),
        ];
        let drift = ep.drift.matvec(&basis).expect("drift basis width");
        self.task_codes[task]
            .iter()
            .zip(&ep.offset)
            .zip(&drift)
            .map(|((code, off), d)| gain * code + c.episode_scale * off + c.drift_scale * d)
            .collect()
    }

    fn render(&self, map: &Matrix, latent: &[f64], noise: f64, seed: u64) -> Vec<f64> {
        let mut out = map.matvec(latent).expect("latent width");
        let mut rng = RngState::new(seed);
        let per_dim = noise / (self.config.feat_dim as f64).sqrt();
        for ((o, c), z) in out.iter_mut().zip(&self.common).zip(rng.gaussian_vec(self.config.feat_dim)) {
            *o += c + per_dim * z;
        }
        out
    }

    fn frame_seed(&self, label: &FrameLabel, view: u64) -> u64 {
        let task = self.task_index(label) as u64;
        let ep = derive_seed(derive_seed(self.config.seed, task), label.episode as u64);
        derive_seed(derive_seed(ep, label.t as u64), view)
    }

    pub fn agent_view(&self, label: &FrameLabel) -> Vec<f64> {
        self.render(&self.agent_map, &self.latent(label), self.config.agent_noise, self.frame_seed(label, 0))
    }

    pub fn wrist_view(&self, label: &FrameLabel) -> Vec<f64> {
        self.render(&self.wrist_map, &self.latent(label), self.config.wrist_noise, self.frame_seed(label, 1))
    }

    /// Anchor times of one episode, drawn uniformly without replacement.
    fn anchors(&self, suite: usize, task: usize, episode: usize) -> Vec<usize> {
        let c = &self.config;
        let key = derive_seed(derive_seed(c.seed, u64::MAX), ((suite * c.tasks_per_suite + task) * c.episodes_per_task + episode) as u64);
        let mut times: Vec<usize> = (0..c.episode_len).collect();
        RngState::new(key).shuffle(&mut times);
        let mut picked = times[..c.anchors_per_episode].to_vec();
        picked.sort_unstable();
        picked
    }

    pub fn frames(&self) -> FrameSet {
        let c = self.config;
        let episodes: Vec<(usize, usize, usize)> = (0..c.suites)
            .flat_map(|s| (0..c.tasks_per_suite).flat_map(move |t| (0..c.episodes_per_task).map(move |e| (s, t, e))))
            .collect();
        let records = episodes
            .par_iter()
            .flat_map_iter(|&(suite, task, episode)| {
                self.anchors(suite, task, episode).into_iter().map(move |t| {
                    let label = FrameLabel { suite, task, episode, t };
                    let future_agent = (t + c.temporal_offset < c.episode_len).then(|| {
                        self.agent_view(&FrameLabel {
                            t: t + c.temporal_offset,
                            ..label
                        })
                    });
                    FrameRecord {
                        label,
                        agent: self.agent_view(&label),
                        wrist: self.wrist_view(&label),
                        future_agent,
                    }
                })
            })
            .collect();
        FrameSet { config: c, records }
    }
}

pub fn gen_synthetic_frames(config: &SyntheticConfig) -> Result<FrameSet> {
    Ok(SyntheticWorld::new(*config)?.frames())
}
