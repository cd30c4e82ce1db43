//! Slow-moving 2-D reach task.
//!
//! The arm sits at `pos` and must come within `eps` of `goal`. Actions are
//! chunk rows whose first two entries are a velocity in units of
//! `max_speed`, clipped to unit norm. Camera features are fixed random linear lifts of the state
//! over a constant background plus per-step nuisance noise, so consecutive
//! frames look alike without ever being identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{derive_seed, Matrix, RngState};
use crate::policy::{ActionChunk, ChunkShape, ObsDims, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachConfig {
    pub obs: ObsDims,
    pub chunk: ChunkShape,
    pub budget: usize,
    pub eps: f64,
    pub max_speed: f64,
    /// Half-width of the square that start and goal are drawn from.
    pub workspace: f64,
    pub min_start_dist: f64,
    /// Proportional gain of the scripted expert.
    pub gain: f64,
    pub background: f64,
    pub lift_scale: f64,
    pub noise_std: f64,
    /// Seeds the lifts; fixed so every episode sees the same camera.
    pub camera_seed: u64,
}

impl Default for ReachConfig {
    fn default() -> Self {
        Self {
            obs: ObsDims::default(),
            chunk: ChunkShape::default(),
            budget: 60,
            eps: 0.05,
            max_speed: 0.05,
            workspace: 0.5,
            min_start_dist: 0.2,
            gain: 0.3,
            background: 1.0,
            lift_scale: 0.3,
            noise_std: 0.15,
            camera_seed: 0x5EED_CA3E,
        }
    }
}

impl ReachConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk.action_dim < 2 || self.obs.prop < 2 || self.obs.img == 0 || self.obs.txt < 2 {
            return Err(Error::Config("reach env needs ≥2 action dims, ≥2 proprio and text dims, and an image".into()));
        }
        let positive = [self.eps, self.max_speed, self.workspace, self.gain];
        if self.budget == 0 || positive.iter().any(|v| !(*v > 0.0)) || !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("invalid reach config {self:?}")));
        }
        if self.min_start_dist >= 2.0 * self.workspace * std::f64::consts::SQRT_2 {
            return Err(Error::Config("min_start_dist cannot be met inside the workspace".into()));
        }
        Ok(())
    }
}

/// Fixed observation model shared by all episodes of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    agent_bg: Vec<f64>,
    wrist_bg: Vec<f64>,
    agent: Matrix,
    wrist: Matrix,
    text: Matrix,
}

impl Camera {
    pub fn new(cfg: &ReachConfig) -> Self {
        let mut rng = RngState::new(cfg.camera_seed);
        let img = cfg.obs.img;
        let bg = |rng: &mut RngState| -> Vec<f64> {
            (0..img).map(|_| cfg.background * (0.5 + rng.uniform())).collect()
        };
        let agent_bg = bg(&mut rng);
        let wrist_bg = bg(&mut rng);
        Self {
            agent_bg,
            wrist_bg,
            agent: Matrix::random_normal(img, 4, cfg.lift_scale, &mut rng),
            wrist: Matrix::random_normal(img, 2, cfg.lift_scale, &mut rng),
            text: Matrix::random_normal(cfg.obs.txt, 2, 1.0 / (2f64).sqrt(), &mut rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachEnv {
    cfg: ReachConfig,
    camera: Camera,
    pos: [f64; 2],
    goal: [f64; 2],
    steps: usize,
    seed: u64,
    done: bool,
    success: bool,
}

fn clip_speed(v: [f64; 2], max: f64) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n > max {
        [v[0] * max / n, v[1] * max / n]
    } else {
        v
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl ReachEnv {
    pub fn new(cfg: ReachConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            camera: Camera::new(&cfg),
            cfg,
            pos: [0.0; 2],
            goal: [0.0; 2],
            steps: 0,
            seed: 0,
            done: true,
            success: false,
        })
    }

    pub fn config(&self) -> &ReachConfig {
        &self.cfg
    }

    pub fn pos(&self) -> [f64; 2] {
        self.pos
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn distance(&self) -> f64 {
        dist(self.pos, self.goal)
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = RngState::new(derive_seed(seed, u64::MAX));
        let w = self.cfg.workspace;
        let draw = |rng: &mut RngState| [w * (2.0 * rng.uniform() - 1.0), w * (2.0 * rng.uniform() - 1.0)];
        self.goal = draw(&mut rng);
        loop {
            self.pos = draw(&mut rng);
            if dist(self.pos, self.goal) >= self.cfg.min_start_dist {
                break;
            }
        }
        self.steps = 0;
        self.seed = seed;
        self.done = false;
        self.success = false;
        self.observe()
    }

    /// Places the arm and goal directly, for scripted scenarios.
    pub fn reset_to(&mut self, pos: [f64; 2], goal: [f64; 2], seed: u64) -> Observation {
        self.pos = pos;
        self.goal = goal;
        self.steps = 0;
        self.seed = seed;
        self.done = false;
        self.success = dist(pos, goal) <= self.cfg.eps;
        self.done = self.success;
        self.observe()
    }

    /// Observation of the current state; the nuisance noise is keyed by
    /// `(episode seed, step)` so repeated calls agree.
    pub fn observe(&self) -> Observation {
        self.observe_state(self.pos, self.goal, derive_seed(self.seed, self.steps as u64))
    }

    pub fn observe_state(&self, pos: [f64; 2], goal: [f64; 2], noise_seed: u64) -> Observation {
        let c = &self.camera;
        let mut rng = RngState::new(noise_seed);
        let sigma = self.cfg.noise_std;
        let state = [pos[0], pos[1], goal[0], goal[1]];
        let rel = [goal[0] - pos[0], goal[1] - pos[1]];
        let mut agent_view = c.agent.matvec(&state).expect("fixed shapes");
        for (v, b) in agent_view.iter_mut().zip(&c.agent_bg) {
            *v += b + sigma * rng.gaussian();
        }
        let mut wrist_view = c.wrist.matvec(&rel).expect("fixed shapes");
        for (v, b) in wrist_view.iter_mut().zip(&c.wrist_bg) {
            *v += b + sigma * rng.gaussian();
        }
        let instruction = c.text.matvec(&goal).expect("fixed shapes");
        let mut proprio = vec![0.0; self.cfg.obs.prop];
        proprio[0] = pos[0];
        proprio[1] = pos[1];
        Observation {
            agent_view,
            wrist_view,
            instruction,
            proprio,
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<(Observation, StepOutcome)> {
        if self.done {
            return Err(Error::State("step called on a finished episode".into()));
        }
        if action.len() != self.cfg.chunk.action_dim {
            return Err(Error::shape(format!(
                "action has {} dims, expected {}",
                action.len(),
                self.cfg.chunk.action_dim
            )));
        }
        let v = clip_speed([action[0], action[1]], 1.0);
        let v = if v[0].is_finite() && v[1].is_finite() { v } else { [0.0, 0.0] };
        let s = self.cfg.max_speed;
        self.pos = [self.pos[0] + s * v[0], self.pos[1] + s * v[1]];
        self.steps += 1;
        self.success = self.distance() <= self.cfg.eps;
        self.done = self.success || self.steps >= self.cfg.budget;
        Ok((
            self.observe(),
            StepOutcome {
                done: self.done,
                success: self.success,
            },
        ))
    }

    /// Normalized expert action from an arbitrary state.
    pub fn expert_action(&self, pos: [f64; 2], goal: [f64; 2]) -> [f64; 2] {
        let g = self.cfg.gain / self.cfg.max_speed;
        clip_speed([g * (goal[0] - pos[0]), g * (goal[1] - pos[1])], 1.0)
    }

    /// The chunk the expert would execute open-loop from `(pos, goal)`.
    pub fn expert_chunk_from(&self, pos: [f64; 2], goal: [f64; 2]) -> ActionChunk {
        let shape = self.cfg.chunk;
        let mut chunk = ActionChunk::zeros(shape);
        let mut p = pos;
        for t in 0..shape.horizon {
            let a = self.expert_action(p, goal);
            let row = &mut chunk.as_mut_slice()[t * shape.action_dim..(t + 1) * shape.action_dim];
            row[0] = a[0];
            row[1] = a[1];
            p = [p[0] + self.cfg.max_speed * a[0], p[1] + self.cfg.max_speed * a[1]];
        }
        chunk
    }

    pub fn expert_chunk(&self) -> ActionChunk {
        self.expert_chunk_from(self.pos, self.goal)
    }

    /// Random mid-episode state of the expert and its observation, used
    /// for demonstrations and preference pairs.
    pub fn expert_sample(&mut self, rng: &mut RngState) -> (Observation, ActionChunk) {
        self.reset(rng.next_u64());
        let warm = rng.below(self.cfg.budget / 2 + 1);
        for _ in 0..warm {
            if self.done {
                break;
            }
            let a = self.expert_action(self.pos, self.goal);
            let mut row = vec![0.0; self.cfg.chunk.action_dim];
            row[..2].copy_from_slice(&a);
            self.step(&row).expect("episode still running");
        }
        (self.observe(), self.expert_chunk())
    }
}

/// Expert demonstrations covering whole episodes.
pub fn expert_demos(cfg: &ReachConfig, n: usize, seed: u64) -> Result<Vec<(Observation, ActionChunk)>> {
    let mut env = ReachEnv::new(*cfg)?;
    let mut rng = RngState::new(seed);
    Ok((0..n).map(|_| env.expert_sample(&mut rng)).collect())
}
