//! Autoregressive token backbone.
//!
//! Each action dimension is binned into `V` tokens and the chunk is
//! factorized left to right over the row-major `(t, a)` positions. Logits at
//! position `p` come from a one-hidden-layer network over the encoded
//! observation, a one-hot position code and a one-hot previous token (with a
//! start symbol at `p = 0`). Log-probabilities are exact under teacher forcing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, gelu, gelu_grad, log_sum_exp, FitConfig, Parameterized, Scope};
use crate::numkit::{Matrix, RngState, TensorMap};
use crate::optim::{Adam, AdamConfig};
use crate::peft::{AdaptedLinear, AdapterConfig, Effective, LinearGrad, ReferenceSnapshot};
use crate::policy::{
    check_batch, ActionChunk, Batch, ChunkShape, ConditionedSampler, ObsDims, Observation, Policy,
    TrainablePolicy,
};

/// Vocabulary size of the original 7-DoF tokenizer.
pub const FULL_BINS: usize = 256;
/// Small enough for brute-force checks.
pub const DESK_BINS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    bins: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// `(T, A)` grid of token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub shape: ChunkShape,
    pub tokens: Vec<usize>,
}

impl Tokenizer {
    pub fn new(bins: usize, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
        }
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Config("lo/hi must be non-empty and equal length".into()));
        }
        if let Some(d) = (0..lo.len()).find(|&d| !(lo[d] < hi[d]) || !lo[d].is_finite() || !hi[d].is_finite()) {
            return Err(Error::Config(format!("dim {d}: need finite lo < hi, got [{}, {}]", lo[d], hi[d])));
        }
        Ok(Self { bins, lo, hi })
    }

    /// Same range on every dimension.
    pub fn uniform(bins: usize, action_dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(bins, vec![lo; action_dim], vec![hi; action_dim])
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn action_dim(&self) -> usize {
        self.lo.len()
    }

    pub fn bin_width(&self, dim: usize) -> f64 {
        (self.hi[dim] - self.lo[dim]) / self.bins as f64
    }

    pub fn token(&self, dim: usize, x: f64) -> usize {
        let (lo, hi) = (self.lo[dim], self.hi[dim]);
        let x = x.clamp(lo, hi);
        let b = ((x - lo) / (hi - lo) * self.bins as f64).floor();
        // NaN maps to bin 0 through the saturating cast.
        (b as usize).min(self.bins - 1)
    }

    pub fn center(&self, dim: usize, token: usize) -> f64 {
        self.lo[dim] + (token as f64 + 0.5) * self.bin_width(dim)
    }

    pub fn discretize(&self, chunk: &ActionChunk) -> Result<TokenGrid> {
        let shape = chunk.shape();
        if shape.action_dim != self.action_dim() {
            return Err(Error::shape(format!(
                "chunk has {} action dims, tokenizer {}",
                shape.action_dim,
                self.action_dim()
            )));
        }
        let tokens = chunk
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &x)| self.token(i % shape.action_dim, x))
            .collect();
        Ok(TokenGrid { shape, tokens })
    }

    pub fn undiscretize(&self, grid: &TokenGrid) -> Result<ActionChunk> {
        let a = grid.shape.action_dim;
        if a != self.action_dim() || grid.tokens.len() != grid.shape.len() {
            return Err(Error::shape("token grid does not match tokenizer"));
        }
        if let Some((i, &tok)) = grid.tokens.iter().enumerate().find(|(_, &t)| t >= self.bins) {
            return Err(Error::arg(format!("token {tok} at position {i} outside 0..{}", self.bins)));
        }
        let data = grid
            .tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| self.center(i % a, t))
            .collect();
        ActionChunk::from_flat(grid.shape, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArConfig {
    pub obs: ObsDims,
    pub chunk: ChunkShape,
    pub hidden: usize,
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    /// Sampling temperature; zero means greedy.
    pub temperature: f64,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            obs: ObsDims::default(),
            chunk: ChunkShape::default(),
            hidden: 64,
            bins: DESK_BINS,
            lo: -1.0,
            hi: 1.0,
            temperature: 1.0,
        }
    }
}

impl ArConfig {
    fn input_len(&self) -> usize {
        self.obs.flat_len() + self.chunk.len() + self.bins + 1
    }
}

/// Two adapter-wrappable layers producing per-position logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ArNet {
    pub layers: [AdaptedLinear; 2],
}

const LAYER_NAMES: [&str; 2] = ["l1", "l2"];

struct Prepared<'a> {
    net: &'a ArNet,
    eff: [Effective; 2],
}

struct Step {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
}

impl ArNet {
    fn prepare(&self) -> Result<Prepared<'_>> {
        Ok(Prepared {
            net: self,
            eff: [self.layers[0].effective()?, self.layers[1].effective()?],
        })
    }
}

impl Parameterized for ArNet {
    fn visit_params(&self, scope: Scope, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit(scope, f));
    }

    fn visit_params_mut(&mut self, scope: Scope, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(scope, f));
    }
}

impl Prepared<'_> {
    /// Input layout: `[cond | onehot(position) | onehot(prev token or start)]`.
    fn step(&self, cond: &[f64], n_pos: usize, bins: usize, pos: usize, prev: Option<usize>) -> Result<Step> {
        let mut input = Vec::with_capacity(cond.len() + n_pos + bins + 1);
        input.extend_from_slice(cond);
        input.resize(cond.len() + n_pos + bins + 1, 0.0);
        input[cond.len() + pos] = 1.0;
        input[cond.len() + n_pos + prev.map_or(bins, |t| t)] = 1.0;
        let pre = self.net.layers[0].apply(&self.eff[0], &input)?;
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let logits = self.net.layers[1].apply(&self.eff[1], &act)?;
        ensure_finite(&logits, "token logits")?;
        Ok(Step { input, pre, act, logits })
    }

    fn backward(&self, s: &Step, g_logits: &[f64], grads: &mut [LinearGrad; 2]) -> Result<()> {
        grads[1].accumulate(&s.act, g_logits);
        let mut g = AdaptedLinear::input_grad(&self.eff[1], g_logits)?;
        for (gi, &z) in g.iter_mut().zip(&s.pre) {
            *gi *= gelu_grad(z);
        }
        grads[0].accumulate(&s.input, &g);
        Ok(())
    }

    fn zero_grads(&self) -> [LinearGrad; 2] {
        let l = &self.net.layers;
        [
            LinearGrad::zeros(l[0].out_dim(), l[0].in_dim()),
            LinearGrad::zeros(l[1].out_dim(), l[1].in_dim()),
        ]
    }

    fn param_grads(&self, grads: &[LinearGrad; 2], scope: Scope) -> Result<Vec<f64>> {
        let mut out = self.net.layers[0].param_grads(&self.eff[0], &grads[0], scope)?;
        out.extend(self.net.layers[1].param_grads(&self.eff[1], &grads[1], scope)?);
        Ok(out)
    }
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    logits[k] - log_sum_exp(logits)
}

#[derive(Debug, Clone)]
pub struct ArPolicy {
    config: ArConfig,
    tokenizer: Tokenizer,
    net: ArNet,
    reference: Option<ReferenceSnapshot<ArNet>>,
}

impl ArPolicy {
    pub fn new(config: ArConfig, seed: u64) -> Result<Self> {
        let tokenizer = Tokenizer::uniform(config.bins, config.chunk.action_dim, config.lo, config.hi)?;
        if config.hidden == 0 {
            return Err(Error::Config("hidden must be positive".into()));
        }
        if !(config.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature {} must be ≥ 0", config.temperature)));
        }
        let mut rng = RngState::new(seed);
        let net = ArNet {
            layers: [
                AdaptedLinear::init(config.input_len(), config.hidden, &mut rng),
                AdaptedLinear::init(config.hidden, config.bins, &mut rng),
            ],
        };
        Ok(Self {
            config,
            tokenizer,
            net,
            reference: None,
        })
    }

    /// All-zero weights: uniform logits at every position.
    pub fn uniform(config: ArConfig) -> Result<Self> {
        let mut p = Self::new(config, 0)?;
        for l in &mut p.net.layers {
            l.weight = Matrix::zeros(l.out_dim(), l.in_dim());
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        Ok(p)
    }

    pub fn config(&self) -> &ArConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn net(&self) -> &ArNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut ArNet {
        &mut self.net
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

    fn grid(&self, chunk: &ActionChunk) -> Result<TokenGrid> {
        chunk.ensure_shape(self.config.chunk)?;
        self.tokenizer.discretize(chunk)
    }

    /// Per-position logits under teacher forcing.
    pub fn logits(&self, obs: &Observation, grid: &TokenGrid) -> Result<Vec<Vec<f64>>> {
        let cond = self.encode(obs)?;
        let p = self.net.prepare()?;
        let n = self.config.chunk.len();
        (0..n)
            .map(|pos| {
                let prev = pos.checked_sub(1).map(|q| grid.tokens[q]);
                Ok(p.step(&cond, n, self.config.bins, pos, prev)?.logits)
            })
            .collect()
    }

    fn grid_logp_under(&self, net: &ArNet, cond: &[f64], grid: &TokenGrid) -> Result<f64> {
        let p = net.prepare()?;
        let n = self.config.chunk.len();
        let mut total = 0.0;
        for pos in 0..n {
            let prev = pos.checked_sub(1).map(|q| grid.tokens[q]);
            let s = p.step(cond, n, self.config.bins, pos, prev)?;
            total += log_softmax_at(&s.logits, grid.tokens[pos]);
        }
        Ok(total)
    }

    /// Exact log-probability of a token grid.
    pub fn grid_logp(&self, obs: &Observation, grid: &TokenGrid) -> Result<f64> {
        if grid.shape != self.config.chunk || grid.tokens.iter().any(|&t| t >= self.config.bins) {
            return Err(Error::arg("token grid shape or range does not match the policy"));
        }
        self.grid_logp_under(&self.net, &self.encode(obs)?, grid)
    }

    /// Sum of token log-probabilities of the discretized chunk.
    pub fn token_logp(&self, obs: &Observation, chunk: &ActionChunk) -> Result<f64> {
        let grid = self.grid(chunk)?;
        self.grid_logp_under(&self.net, &self.encode(obs)?, &grid)
    }

    pub fn token_logp_grad(&self, obs: &Observation, chunk: &ActionChunk, scope: Scope) -> Result<(f64, Vec<f64>)> {
        let grid = self.grid(chunk)?;
        let cond = self.encode(obs)?;
        let p = self.net.prepare()?;
        let mut grads = p.zero_grads();
        let n = self.config.chunk.len();
        let mut total = 0.0;
        for pos in 0..n {
            let prev = pos.checked_sub(1).map(|q| grid.tokens[q]);
            let s = p.step(&cond, n, self.config.bins, pos, prev)?;
            let lse = log_sum_exp(&s.logits);
            let tok = grid.tokens[pos];
            total += s.logits[tok] - lse;
            let mut g: Vec<f64> = s.logits.iter().map(|&l| -(l - lse).exp()).collect();
            g[tok] += 1.0;
            p.backward(&s, &g, &mut grads)?;
        }
        Ok((total, p.param_grads(&grads, scope)?))
    }

    fn sample_grid(&self, cond: &[f64], temperature: f64, seed: u64) -> Result<TokenGrid> {
        if !(temperature >= 0.0) {
            return Err(Error::arg(format!("temperature {temperature} must be ≥ 0")));
        }
        let p = self.net.prepare()?;
        let n = self.config.chunk.len();
        let mut rng = RngState::new(seed);
        let mut tokens = Vec::with_capacity(n);
        for pos in 0..n {
            let s = p.step(cond, n, self.config.bins, pos, tokens.last().copied())?;
            let tok = if temperature == 0.0 {
                argmax(&s.logits)
            } else {
                let scaled: Vec<f64> = s.logits.iter().map(|l| l / temperature).collect();
                let lse = log_sum_exp(&scaled);
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut pick = scaled.len() - 1;
                for (k, l) in scaled.iter().enumerate() {
                    acc += (l - lse).exp();
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                pick
            };
            tokens.push(tok);
        }
        Ok(TokenGrid {
            shape: self.config.chunk,
            tokens,
        })
    }

    pub fn sample_with_temperature(&self, obs: &Observation, temperature: f64, seed: u64) -> Result<ActionChunk> {
        let cond = self.encode(obs)?;
        self.tokenizer.undiscretize(&self.sample_grid(&cond, temperature, seed)?)
    }

    /// Teacher-forced cross-entropy on demonstrations, training base weights.
    /// Returns the mean per-token loss at each step.
    pub fn fit(&mut self, data: &[(Observation, ActionChunk)], fit: &FitConfig) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::arg("no demonstrations"));
        }
        let n = self.config.chunk.len();
        let mut rng = RngState::new(fit.seed);
        let mut params = self.net.flat_params(Scope::Base);
        let mut opt = Adam::new(params.len(), AdamConfig::default());
        let mut losses = Vec::with_capacity(fit.steps);
        for step in 0..fit.steps {
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            for _ in 0..fit.batch {
                let (obs, chunk) = &data[rng.below(data.len())];
                let (lp, g) = self.token_logp_grad(obs, chunk, Scope::Base)?;
                loss -= lp;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a -= b;
                }
            }
            let scale = 1.0 / (fit.batch * n) as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("cross-entropy {loss}"),
                });
            }
            opt.step(&mut params, &grad, fit.lr);
            self.net.set_flat_params(Scope::Base, &params)?;
            losses.push(loss);
        }
        Ok(losses)
    }

    pub fn export(&self) -> TensorMap {
        let mut map = TensorMap::new();
        for (l, name) in self.net.layers.iter().zip(LAYER_NAMES) {
            l.export(name, &mut map);
        }
        map
    }

    pub fn import(config: ArConfig, map: &TensorMap, adapter: Option<AdapterConfig>) -> Result<Self> {
        let mut p = Self::new(config, 0)?;
        let layers = [
            AdaptedLinear::import(LAYER_NAMES[0], map, adapter)?,
            AdaptedLinear::import(LAYER_NAMES[1], map, adapter)?,
        ];
        if layers[0].in_dim() != p.config.input_len() || layers[1].out_dim() != p.config.bins {
            return Err(Error::Config("checkpoint does not match AR configuration".into()));
        }
        p.net = ArNet { layers };
        Ok(p)
    }
}

fn argmax(xs: &[f64]) -> usize {
    // First maximum wins ties.
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Parameterized for ArPolicy {
    fn visit_params(&self, scope: Scope, f: &mut dyn FnMut(&[f64])) {
        self.net.visit_params(scope, f)
    }

    fn visit_params_mut(&mut self, scope: Scope, f: &mut dyn FnMut(&mut [f64])) {
        self.net.visit_params_mut(scope, f)
    }
}

impl Policy for ArPolicy {
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

    /// Exact, so `seed` is ignored.
    fn policy_logp(&self, batch: &Batch, chunks: &[ActionChunk], _seed: u64) -> Result<Vec<f64>> {
        check_batch(batch, chunks)?;
        batch
            .observations
            .iter()
            .zip(chunks)
            .map(|(o, c)| self.token_logp(o, c))
            .collect()
    }

    fn policy_logp_with_ref(&self, batch: &Batch, chunks: &[ActionChunk], seed: u64) -> Result<Vec<(f64, f64)>> {
        check_batch(batch, chunks)?;
        batch
            .observations
            .iter()
            .zip(chunks)
            .map(|(o, c)| Ok((self.token_logp(o, c)?, self.reference_logp(o, c, seed)?)))
            .collect()
    }

    /// `num_steps` has no meaning for this backbone and is ignored.
    fn sample_actions(&self, obs: &Observation, _num_steps: usize, seed: u64) -> Result<ActionChunk> {
        self.sample_with_temperature(obs, self.config.temperature, seed)
    }
}

impl ConditionedSampler for ArPolicy {
    fn sample_encoded(&self, enc: &Vec<f64>, _num_steps: usize, seed: u64) -> Result<ActionChunk> {
        self.tokenizer
            .undiscretize(&self.sample_grid(enc, self.config.temperature, seed)?)
    }
}

impl TrainablePolicy for ArPolicy {
    fn logp_and_grad(&self, obs: &Observation, chunk: &ActionChunk, _seed: u64, scope: Scope) -> Result<(f64, Vec<f64>)> {
        self.token_logp_grad(obs, chunk, scope)
    }

    fn reference_logp(&self, obs: &Observation, chunk: &ActionChunk, _seed: u64) -> Result<f64> {
        let reference = self
            .reference
            .as_ref()
            .ok_or_else(|| Error::State("no reference snapshot taken".into()))?;
        let grid = self.grid(chunk)?;
        self.grid_logp_under(reference.get(), &self.encode(obs)?, &grid)
    }

    fn snapshot_reference(&mut self) {
        self.reference = Some(ReferenceSnapshot::capture(&self.net));
    }

    fn has_reference(&self) -> bool {
        self.reference.is_some()
    }
}
