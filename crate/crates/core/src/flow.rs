//! Flow-matching backbone.
//!
//! A feed-forward velocity field `v(x_t, t, obs)` with two GELU hidden
//! layers, Euler sampling from Gaussian noise, and the surrogate
//! log-probability used for preference training:
//!
//! ```text
//! log p̃(x1 | obs) = −(1/T_eval) Σ_t ‖v(x_t, t, obs) − (x1 − x0)‖²,   x_t = (1−t)·x0 + t·x1
//! ```
//!
//! evaluated on a stratified t-grid with one shared noise draw `x0`. The
//! estimator is a pure function of `(obs, x1, noise seed)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, gelu, gelu_grad, FitConfig, Parameterized, Scope};
use crate::numkit::{Matrix, RngState, TensorMap};
use crate::optim::{Adam, AdamConfig};
use crate::peft::{AdaptedLinear, AdapterConfig, Effective, LinearGrad, ReferenceSnapshot};
use crate::policy::{
    check_batch, ActionChunk, Batch, ChunkShape, ConditionedSampler, ObsDims, Observation, Policy,
    TrainablePolicy,
};

pub const DEFAULT_NUM_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub t_eval: usize,
    /// Seeded uniform jitter of at most half a stratum around each midpoint.
    pub jitter: bool,
    pub noise_seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            t_eval: 4,
            jitter: true,
            noise_seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn with_seed(self, noise_seed: u64) -> Self {
        Self { noise_seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_eval == 0 {
            return Err(Error::Config("t_eval must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub obs: ObsDims,
    pub chunk: ChunkShape,
    pub hidden: usize,
    pub num_steps: usize,
    pub surrogate: SurrogateConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            obs: ObsDims::default(),
            chunk: ChunkShape::default(),
            hidden: 64,
            num_steps: DEFAULT_NUM_STEPS,
            surrogate: SurrogateConfig::default(),
        }
    }
}

/// Anything that can play the role of `v(x_t, t, cond)`.
pub trait VelocityField {
    fn velocity(&self, x_t: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>>;
}

impl<F> VelocityField for F
where
    F: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
{
    fn velocity(&self, x_t: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        Ok(self(x_t, t, cond))
    }
}

/// `(x_t, v_target)` for the straight path from `x0` to `x1`.
pub fn flow_interpolate(x0: &ActionChunk, x1: &ActionChunk, t: f64) -> Result<(ActionChunk, ActionChunk)> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("flow_interpolate: chunk shapes differ"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::arg(format!("t = {t} outside [0, 1]")));
    }
    let shape = x0.shape();
    let (a, b) = (x0.as_slice(), x1.as_slice());
    let xt = interpolate(a, b, t);
    let v = b.iter().zip(a).map(|(y, x)| y - x).collect();
    Ok((ActionChunk::from_flat(shape, xt)?, ActionChunk::from_flat(shape, v)?))
}

fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Stratum midpoints `(i + 0.5)/T`, optionally jittered by `(u − 0.5)/T`.
pub fn t_grid(t_eval: usize, jitter: bool, rng: &mut RngState) -> Vec<f64> {
    let n = t_eval as f64;
    (0..t_eval)
        .map(|i| {
            let mid = (i as f64 + 0.5) / n;
            if jitter {
                mid + (rng.uniform() - 0.5) / n
            } else {
                mid
            }
        })
        .collect()
}

/// Noise draw and t-grid fixed by a surrogate configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateNoise {
    pub x0: Vec<f64>,
    pub t_grid: Vec<f64>,
}

impl SurrogateNoise {
    pub fn from_config(cfg: &SurrogateConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(cfg.noise_seed);
        let x0 = rng.gaussian_vec(dim);
        let t_grid = t_grid(cfg.t_eval, cfg.jitter, &mut rng);
        Ok(Self { x0, t_grid })
    }
}

/// Negative mean squared velocity residual over the t-grid.
pub fn surrogate_logp_with_noise(
    field: &impl VelocityField,
    x1: &[f64],
    cond: &[f64],
    noise: &SurrogateNoise,
) -> Result<f64> {
    if noise.x0.len() != x1.len() {
        return Err(Error::shape("noise and chunk lengths differ"));
    }
    let target: Vec<f64> = x1.iter().zip(&noise.x0).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for &t in &noise.t_grid {
        let xt = interpolate(&noise.x0, x1, t);
        let v = field.velocity(&xt, t, cond)?;
        ensure_finite(&v, "velocity network output")?;
        if v.len() != target.len() {
            return Err(Error::shape("velocity field output length"));
        }
        total += v.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(-total / noise.t_grid.len() as f64)
}

/// Euler integration `x ← x + v(x, k/N)/N` for `k = 0..N`.
pub fn euler_sample(field: &impl VelocityField, cond: &[f64], x0: Vec<f64>, num_steps: usize) -> Result<Vec<f64>> {
    if num_steps == 0 {
        return Err(Error::arg("num_steps must be at least 1"));
    }
    let dt = 1.0 / num_steps as f64;
    let mut x = x0;
    for k in 0..num_steps {
        let v = field.velocity(&x, k as f64 * dt, cond)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

/// Three adapter-wrappable linear layers: input → hidden → hidden → chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    pub layers: [AdaptedLinear; 3],
    chunk_len: usize,
    cond_len: usize,
}

const LAYER_NAMES: [&str; 3] = ["l1", "l2", "l3"];

struct Trace {
    input: Vec<f64>,
    pre: [Vec<f64>; 2],
    act: [Vec<f64>; 2],
}

pub struct PreparedNet<'a> {
    net: &'a VelocityNet,
    eff: [Effective; 3],
}

impl VelocityNet {
    pub fn new(chunk_len: usize, cond_len: usize, hidden: usize, rng: &mut RngState) -> Self {
        let input = chunk_len + 1 + cond_len;
        Self {
            layers: [
                AdaptedLinear::init(input, hidden, rng),
                AdaptedLinear::init(hidden, hidden, rng),
                AdaptedLinear::init(hidden, chunk_len, rng),
            ],
            chunk_len,
            cond_len,
        }
    }

    pub fn prepare(&self) -> Result<PreparedNet<'_>> {
        Ok(PreparedNet {
            net: self,
            eff: [
                self.layers[0].effective()?,
                self.layers[1].effective()?,
                self.layers[2].effective()?,
            ],
        })
    }

    pub fn export(&self, out: &mut TensorMap) {
        for (l, name) in self.layers.iter().zip(LAYER_NAMES) {
            l.export(name, out);
        }
    }
}

impl PreparedNet<'_> {
    fn input(&self, x_t: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        if x_t.len() != self.net.chunk_len || cond.len() != self.net.cond_len {
            return Err(Error::shape(format!(
                "velocity input: chunk {} (want {}), cond {} (want {})",
                x_t.len(),
                self.net.chunk_len,
                cond.len(),
                self.net.cond_len
            )));
        }
        let mut input = Vec::with_capacity(x_t.len() + 1 + cond.len());
        input.extend_from_slice(x_t);
        input.push(t);
        input.extend_from_slice(cond);
        Ok(input)
    }

    fn forward_traced(&self, x_t: &[f64], t: f64, cond: &[f64]) -> Result<(Vec<f64>, Trace)> {
        let input = self.input(x_t, t, cond)?;
        let l = &self.net.layers;
        let z1 = l[0].apply(&self.eff[0], &input)?;
        let h1: Vec<f64> = z1.iter().map(|&v| gelu(v)).collect();
        let z2 = l[1].apply(&self.eff[1], &h1)?;
        let h2: Vec<f64> = z2.iter().map(|&v| gelu(v)).collect();
        let out = l[2].apply(&self.eff[2], &h2)?;
        Ok((
            out,
            Trace {
                input,
                pre: [z1, z2],
                act: [h1, h2],
            },
        ))
    }

    fn backward(&self, trace: &Trace, g_out: &[f64], grads: &mut [LinearGrad; 3]) -> Result<()> {
        grads[2].accumulate(&trace.act[1], g_out);
        let mut g = AdaptedLinear::input_grad(&self.eff[2], g_out)?;
        for (gi, &z) in g.iter_mut().zip(&trace.pre[1]) {
            *gi *= gelu_grad(z);
        }
        grads[1].accumulate(&trace.act[0], &g);
        let mut g = AdaptedLinear::input_grad(&self.eff[1], &g)?;
        for (gi, &z) in g.iter_mut().zip(&trace.pre[0]) {
            *gi *= gelu_grad(z);
        }
        grads[0].accumulate(&trace.input, &g);
        Ok(())
    }

    fn zero_grads(&self) -> [LinearGrad; 3] {
        let l = &self.net.layers;
        [
            LinearGrad::zeros(l[0].out_dim(), l[0].in_dim()),
            LinearGrad::zeros(l[1].out_dim(), l[1].in_dim()),
            LinearGrad::zeros(l[2].out_dim(), l[2].in_dim()),
        ]
    }

    fn param_grads(&self, grads: &[LinearGrad; 3], scope: Scope) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for ((layer, eff), g) in self.net.layers.iter().zip(&self.eff).zip(grads) {
            out.extend(layer.param_grads(eff, g, scope)?);
        }
        Ok(out)
    }

    /// Surrogate log-probability and its parameter gradient.
    fn surrogate_with_grad(
        &self,
        x1: &[f64],
        cond: &[f64],
        noise: &SurrogateNoise,
        grads: &mut [LinearGrad; 3],
    ) -> Result<f64> {
        let target: Vec<f64> = x1.iter().zip(&noise.x0).map(|(a, b)| a - b).collect();
        let n = noise.t_grid.len() as f64;
        let mut total = 0.0;
        for &t in &noise.t_grid {
            let xt = interpolate(&noise.x0, x1, t);
            let (v, trace) = self.forward_traced(&xt, t, cond)?;
            ensure_finite(&v, "velocity network output")?;
            let resid: Vec<f64> = v.iter().zip(&target).map(|(a, b)| a - b).collect();
            total += resid.iter().map(|r| r * r).sum::<f64>();
            let g: Vec<f64> = resid.iter().map(|r| -2.0 * r / n).collect();
            self.backward(&trace, &g, grads)?;
        }
        Ok(-total / n)
    }
}

impl VelocityField for PreparedNet<'_> {
    fn velocity(&self, x_t: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_traced(x_t, t, cond)?.0)
    }
}

impl Parameterized for VelocityNet {
    fn visit_params(&self, scope: Scope, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit(scope, f));
    }

    fn visit_params_mut(&mut self, scope: Scope, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(scope, f));
    }
}

#[derive(Debug, Clone)]
pub struct FlowPolicy {
    config: FlowConfig,
    net: VelocityNet,
    reference: Option<ReferenceSnapshot<VelocityNet>>,
}

impl FlowPolicy {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.surrogate.validate()?;
        if config.num_steps == 0 || config.hidden == 0 {
            return Err(Error::Config("num_steps and hidden must be positive".into()));
        }
        let mut rng = RngState::new(seed);
        let net = VelocityNet::new(config.chunk.len(), config.obs.flat_len(), config.hidden, &mut rng);
        Ok(Self {
            config,
            net,
            reference: None,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn net(&self) -> &VelocityNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut VelocityNet {
        &mut self.net
    }

    pub fn reference(&self) -> Option<&ReferenceSnapshot<VelocityNet>> {
        self.reference.as_ref()
    }

    pub fn attach_adapters(&mut self, cfg: AdapterConfig, seed: u64) -> Result<()> {
        let mut rng = RngState::new(seed);
        for l in &mut self.net.layers {
            l.attach(cfg, &mut rng)?;
        }
        Ok(())
    }

    fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        obs.validate(self.config.obs)?;
        Ok(obs.flatten())
    }

    fn noise(&self, cfg: &SurrogateConfig) -> Result<SurrogateNoise> {
        SurrogateNoise::from_config(cfg, self.config.chunk.len())
    }

    pub fn surrogate_logp(&self, obs: &Observation, x1: &ActionChunk, cfg: &SurrogateConfig) -> Result<f64> {
        x1.ensure_shape(self.config.chunk)?;
        let cond = self.encode(obs)?;
        surrogate_logp_with_noise(&self.net.prepare()?, x1.as_slice(), &cond, &self.noise(cfg)?)
    }

    /// Surrogate under an arbitrary network, e.g. a reference snapshot.
    pub fn surrogate_logp_under(
        &self,
        net: &VelocityNet,
        obs: &Observation,
        x1: &ActionChunk,
        cfg: &SurrogateConfig,
    ) -> Result<f64> {
        x1.ensure_shape(self.config.chunk)?;
        let cond = self.encode(obs)?;
        surrogate_logp_with_noise(&net.prepare()?, x1.as_slice(), &cond, &self.noise(cfg)?)
    }

    /// `(cur, ref)` with an explicit configuration for each side; the two must
    /// agree, since the reference forward has to replay the same noise.
    pub fn logp_with_ref_checked(
        &self,
        obs: &Observation,
        chunk: &ActionChunk,
        cur_cfg: &SurrogateConfig,
        ref_cfg: &SurrogateConfig,
    ) -> Result<(f64, f64)> {
        if cur_cfg != ref_cfg {
            return Err(Error::Contract(format!(
                "current and reference must share noise seed and t-grid ({cur_cfg:?} vs {ref_cfg:?})"
            )));
        }
        let reference = self
            .reference
            .as_ref()
            .ok_or_else(|| Error::State("no reference snapshot taken".into()))?;
        let cur = self.surrogate_logp(obs, chunk, cur_cfg)?;
        let rf = self.surrogate_logp_under(reference.get(), obs, chunk, ref_cfg)?;
        Ok((cur, rf))
    }

    pub fn surrogate_logp_grad(
        &self,
        obs: &Observation,
        x1: &ActionChunk,
        cfg: &SurrogateConfig,
        scope: Scope,
    ) -> Result<(f64, Vec<f64>)> {
        x1.ensure_shape(self.config.chunk)?;
        let cond = self.encode(obs)?;
        let prepared = self.net.prepare()?;
        let mut grads = prepared.zero_grads();
        let lp = prepared.surrogate_with_grad(x1.as_slice(), &cond, &self.noise(cfg)?, &mut grads)?;
        Ok((lp, prepared.param_grads(&grads, scope)?))
    }

    /// Euler sample from a given conditioning vector.
    pub fn sample_from_cond(&self, cond: &[f64], num_steps: usize, seed: u64) -> Result<ActionChunk> {
        let steps = if num_steps == 0 { self.config.num_steps } else { num_steps };
        let x0 = RngState::new(seed).gaussian_vec(self.config.chunk.len());
        let x = euler_sample(&self.net.prepare()?, cond, x0, steps)?;
        ActionChunk::from_flat(self.config.chunk, x)
    }

    /// Conditional flow-matching regression on `(obs, chunk)` demonstrations,
    /// training the base weights. Returns the per-step mean loss.
    pub fn fit(&mut self, data: &[(Observation, ActionChunk)], fit: &FitConfig) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::arg("no demonstrations"));
        }
        let conds = data.iter().map(|(o, _)| self.encode(o)).collect::<Result<Vec<_>>>()?;
        let dim = self.config.chunk.len();
        let mut rng = RngState::new(fit.seed);
        let mut params = self.net.flat_params(Scope::Base);
        let mut opt = Adam::new(params.len(), AdamConfig::default());
        let mut losses = Vec::with_capacity(fit.steps);
        for step in 0..fit.steps {
            let prepared = self.net.prepare()?;
            let mut grads = prepared.zero_grads();
            let mut loss = 0.0;
            let scale = 1.0 / (fit.batch * dim) as f64;
            for _ in 0..fit.batch {
                let i = rng.below(data.len());
                let x1 = data[i].1.as_slice();
                let x0 = rng.gaussian_vec(dim);
                let t = rng.uniform();
                let xt = interpolate(&x0, x1, t);
                let (v, trace) = prepared.forward_traced(&xt, t, &conds[i])?;
                let resid: Vec<f64> = v.iter().zip(x1.iter().zip(&x0)).map(|(v, (a, b))| v - (a - b)).collect();
                loss += resid.iter().map(|r| r * r).sum::<f64>() * scale;
                let g: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale).collect();
                prepared.backward(&trace, &g, &mut grads)?;
            }
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("flow-matching loss {loss}"),
                });
            }
            let g = prepared.param_grads(&grads, Scope::Base)?;
            drop(prepared);
            opt.step(&mut params, &g, fit.lr);
            self.net.set_flat_params(Scope::Base, &params)?;
            losses.push(loss);
        }
        Ok(losses)
    }

    pub fn export(&self) -> TensorMap {
        let mut map = TensorMap::new();
        self.net.export(&mut map);
        map
    }

    pub fn import(config: FlowConfig, map: &TensorMap, adapter: Option<AdapterConfig>) -> Result<Self> {
        let layers = [
            AdaptedLinear::import(LAYER_NAMES[0], map, adapter)?,
            AdaptedLinear::import(LAYER_NAMES[1], map, adapter)?,
            AdaptedLinear::import(LAYER_NAMES[2], map, adapter)?,
        ];
        let input = config.chunk.len() + 1 + config.obs.flat_len();
        if layers[0].in_dim() != input || layers[2].out_dim() != config.chunk.len() {
            return Err(Error::Config("checkpoint does not match flow configuration".into()));
        }
        Ok(Self {
            config,
            net: VelocityNet {
                layers,
                chunk_len: config.chunk.len(),
                cond_len: config.obs.flat_len(),
            },
            reference: None,
        })
    }
}

impl Parameterized for FlowPolicy {
    fn visit_params(&self, scope: Scope, f: &mut dyn FnMut(&[f64])) {
        self.net.visit_params(scope, f)
    }

    fn visit_params_mut(&mut self, scope: Scope, f: &mut dyn FnMut(&mut [f64])) {
        self.net.visit_params_mut(scope, f)
    }
}

impl Policy for FlowPolicy {
    type Encoded = Vec<f64>;

    fn obs_dims(&self) -> ObsDims {
        self.config.obs
    }

    fn chunk_shape(&self) -> ChunkShape {
        self.config.chunk
    }

    fn encode_obs(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.encode(obs)
    }

    fn policy_logp(&self, batch: &Batch, chunks: &[ActionChunk], seed: u64) -> Result<Vec<f64>> {
        check_batch(batch, chunks)?;
        let cfg = self.config.surrogate.with_seed(seed);
        batch
            .observations
            .iter()
            .zip(chunks)
            .map(|(o, c)| self.surrogate_logp(o, c, &cfg))
            .collect()
    }

    fn policy_logp_with_ref(&self, batch: &Batch, chunks: &[ActionChunk], seed: u64) -> Result<Vec<(f64, f64)>> {
        check_batch(batch, chunks)?;
        let cfg = self.config.surrogate.with_seed(seed);
        batch
            .observations
            .iter()
            .zip(chunks)
            .map(|(o, c)| self.logp_with_ref_checked(o, c, &cfg, &cfg))
            .collect()
    }

    fn sample_actions(&self, obs: &Observation, num_steps: usize, seed: u64) -> Result<ActionChunk> {
        let cond = self.encode(obs)?;
        self.sample_from_cond(&cond, num_steps, seed)
    }
}

impl ConditionedSampler for FlowPolicy {
    fn sample_encoded(&self, enc: &Vec<f64>, num_steps: usize, seed: u64) -> Result<ActionChunk> {
        self.sample_from_cond(enc, num_steps, seed)
    }
}

impl TrainablePolicy for FlowPolicy {
    fn logp_and_grad(&self, obs: &Observation, chunk: &ActionChunk, seed: u64, scope: Scope) -> Result<(f64, Vec<f64>)> {
        self.surrogate_logp_grad(obs, chunk, &self.config.surrogate.with_seed(seed), scope)
    }

    fn reference_logp(&self, obs: &Observation, chunk: &ActionChunk, seed: u64) -> Result<f64> {
        let reference = self
            .reference
            .as_ref()
            .ok_or_else(|| Error::State("no reference snapshot taken".into()))?;
        self.surrogate_logp_under(reference.get(), obs, chunk, &self.config.surrogate.with_seed(seed))
    }

    fn snapshot_reference(&mut self) {
        self.reference = Some(ReferenceSnapshot::capture(&self.net));
    }

    fn has_reference(&self) -> bool {
        self.reference.is_some()
    }
}

/// Zero velocity field of a given width, handy for fixed-point tests.
pub fn zero_net(config: &FlowConfig) -> Result<FlowPolicy> {
    let mut p = FlowPolicy::new(*config, 0)?;
    for l in &mut p.net.layers {
        l.weight = Matrix::zeros(l.out_dim(), l.in_dim());
        l.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    Ok(p)
}
