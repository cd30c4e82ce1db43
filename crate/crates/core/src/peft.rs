//! LoRA and DoRA adapted linear layers.
//!
//! A layer holds a frozen base `W0 (out×in)` and bias, and optionally an
//! adapter with factors `B (out×r)`, `A (r×in)` and scale `s = α/r`:
//!
//! * LoRA: `W_eff = W0 + s·BA`
//! * DoRA: `W_eff_j = m_j · W'_j / ‖W'_j‖` with `W' = W0 + s·BA`, one norm per
//!   output channel (row of the out×in matrix), so `m` has length `out`.
//!
//! The effective weight is materialized once (`effective`) and then applied to
//! as many inputs as needed. Gradients are accumulated with respect to `W_eff`
//! ([`LinearGrad`]) and mapped back onto the trainable blocks in one pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scope;
use crate::numkit::{axpy, dot, Matrix, RngState, TensorMap};

/// Rows whose adapted norm falls below this are rejected rather than clamped.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    Lora,
    Dora,
}

impl std::fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterMode::Lora => "lora",
            AdapterMode::Dora => "dora",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub mode: AdapterMode,
    pub rank: usize,
    pub alpha: f64,
    /// Treat the DoRA row norm as a constant in the backward pass.
    pub detach_norm: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            mode: AdapterMode::Dora,
            rank: 4,
            alpha: 8.0,
            detach_norm: false,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub b: Matrix,
    pub a: Matrix,
    /// Per-output-channel magnitude; empty in LoRA mode.
    pub magnitude: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub adapter: Option<Adapter>,
}

/// Materialized weights for one forward pass.
#[derive(Debug, Clone)]
pub struct Effective {
    pub weight: Matrix,
    /// DoRA only: `W0 + s·BA` and its row norms.
    adapted: Option<(Matrix, Vec<f64>)>,
}

/// Gradient accumulator with respect to the effective weight and bias.
#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Adds the contribution of one input `x` with upstream gradient `g`.
    pub fn accumulate(&mut self, x: &[f64], g: &[f64]) {
        self.weight.add_outer(1.0, g, x);
        axpy(1.0, g, &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub b: Matrix,
    pub a: Matrix,
    pub magnitude: Option<Vec<f64>>,
}

impl AdaptedLinear {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "bias of length {} for {} output channels",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            adapter: None,
        })
    }

    /// Uniform init with bound `1/sqrt(in)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self {
            weight: Matrix::random_uniform(out_dim, in_dim, bound, rng),
            bias: vec![0.0; out_dim],
            adapter: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn mode(&self) -> Option<AdapterMode> {
        self.adapter.as_ref().map(|a| a.config.mode)
    }

    /// Attaches a fresh adapter: `B = 0`, `A` uniform, DoRA `m` = row norms of `W0`.
    /// The adapted forward is then exactly the base forward.
    pub fn attach(&mut self, config: AdapterConfig, rng: &mut RngState) -> Result<()> {
        if config.rank == 0 {
            return Err(Error::arg("adapter rank must be at least 1"));
        }
        if self.adapter.is_some() {
            return Err(Error::State("layer already carries an adapter".into()));
        }
        let bound = 1.0 / (self.in_dim().max(1) as f64).sqrt();
        let magnitude = match config.mode {
            AdapterMode::Lora => Vec::new(),
            AdapterMode::Dora => {
                let norms = self.weight.row_norms();
                if let Some((row, &norm)) =
                    norms.iter().enumerate().find(|(_, &n)| n < NORM_FLOOR)
                {
                    return Err(Error::Singularity { row, norm });
                }
                norms
            }
        };
        self.adapter = Some(Adapter {
            config,
            b: Matrix::zeros(self.out_dim(), config.rank),
            a: Matrix::random_uniform(config.rank, self.in_dim(), bound, rng),
            magnitude,
        });
        Ok(())
    }

    pub fn detach(&mut self) -> Option<Adapter> {
        self.adapter.take()
    }

    /// Folds the adapter into the base weight.
    pub fn merge(&mut self) -> Result<()> {
        let eff = self.effective()?;
        self.weight = eff.weight;
        self.adapter = None;
        Ok(())
    }

    pub fn effective(&self) -> Result<Effective> {
        let Some(ad) = &self.adapter else {
            return Ok(Effective {
                weight: self.weight.clone(),
                adapted: None,
            });
        };
        let mut adapted = ad.b.matmul(&ad.a)?;
        let s = ad.config.scale();
        for (w, d) in adapted.data_mut().iter_mut().zip(self.weight.data()) {
            *w = d + s * *w;
        }
        match ad.config.mode {
            AdapterMode::Lora => Ok(Effective {
                weight: adapted,
                adapted: None,
            }),
            AdapterMode::Dora => {
                let norms = adapted.row_norms();
                let mut weight = adapted.clone();
                for (j, &n) in norms.iter().enumerate() {
                    if n < NORM_FLOOR {
                        return Err(Error::Singularity { row: j, norm: n });
                    }
                    // m/n is exactly 1 at init, which keeps W_eff == W0 bit for bit.
                    let scale = ad.magnitude[j] / n;
                    weight.row_mut(j).iter_mut().for_each(|w| *w *= scale);
                }
                Ok(Effective {
                    weight,
                    adapted: Some((adapted, norms)),
                })
            }
        }
    }

    /// `W_eff x + bias`.
    pub fn apply(&self, eff: &Effective, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = eff.weight.matvec(x)?;
        axpy(1.0, &self.bias, &mut y);
        Ok(y)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply(&self.effective()?, x)
    }

    /// `W_effᵀ g`, the gradient with respect to the layer input.
    pub fn input_grad(eff: &Effective, g: &[f64]) -> Result<Vec<f64>> {
        eff.weight.tr_matvec(g)
    }

    /// Maps an accumulated effective-weight gradient onto the trainable
    /// parameters of `scope`, in [`visit`](Self::visit) order.
    pub fn param_grads(&self, eff: &Effective, acc: &LinearGrad, scope: Scope) -> Result<Vec<f64>> {
        match scope {
            Scope::Base => {
                if self.adapter.is_some() {
                    return Err(Error::State(
                        "base weights are frozen while an adapter is attached".into(),
                    ));
                }
                let mut out = acc.weight.data().to_vec();
                out.extend_from_slice(&acc.bias);
                Ok(out)
            }
            Scope::Adapter => match &self.adapter {
                None => Ok(Vec::new()),
                Some(ad) => {
                    let g = self.adapter_grads(ad, eff, &acc.weight)?;
                    let mut out = g.b.into_vec();
                    out.extend(g.a.into_vec());
                    if let Some(m) = g.magnitude {
                        out.extend(m);
                    }
                    Ok(out)
                }
            },
        }
    }

    fn adapter_grads(&self, ad: &Adapter, eff: &Effective, g_eff: &Matrix) -> Result<AdapterGrads> {
        let s = ad.config.scale();
        let (g_adapted, magnitude) = match (&ad.config.mode, &eff.adapted) {
            (AdapterMode::Lora, _) => (g_eff.clone(), None),
            (AdapterMode::Dora, Some((adapted, norms))) => {
                let mut g_adapted = Matrix::zeros(self.out_dim(), self.in_dim());
                let mut dm = vec![0.0; self.out_dim()];
                for j in 0..self.out_dim() {
                    let n = norms[j];
                    let w = adapted.row(j);
                    let gj = g_eff.row(j);
                    let gw = dot(gj, w);
                    dm[j] = gw / n;
                    let scale = ad.magnitude[j] / n;
                    let dst = g_adapted.row_mut(j);
                    axpy(scale, gj, dst);
                    if !ad.config.detach_norm {
                        axpy(-scale * gw / (n * n), w, dst);
                    }
                }
                (g_adapted, Some(dm))
            }
            (AdapterMode::Dora, None) => {
                return Err(Error::State("effective weights were built without the adapter".into()))
            }
        };
        // dB = s·G'·Aᵀ, dA = s·Bᵀ·G'
        let b = g_adapted.matmul(&ad.a.transpose())?.scaled(s);
        let a = ad.b.transpose().matmul(&g_adapted)?.scaled(s);
        Ok(AdapterGrads { b, a, magnitude })
    }

    /// Gradients of `⟨upstream, forward(x)⟩` with respect to `B`, `A` and `m`.
    pub fn adapter_backward(&self, x: &[f64], upstream: &[f64]) -> Result<AdapterGrads> {
        let ad = self
            .adapter
            .as_ref()
            .ok_or_else(|| Error::State("no adapter attached".into()))?;
        if x.len() != self.in_dim() || upstream.len() != self.out_dim() {
            return Err(Error::shape("adapter_backward: input or upstream length"));
        }
        let eff = self.effective()?;
        let mut acc = LinearGrad::zeros(self.out_dim(), self.in_dim());
        acc.accumulate(x, upstream);
        self.adapter_grads(ad, &eff, &acc.weight)
    }

    pub fn visit(&self, scope: Scope, f: &mut dyn FnMut(&[f64])) {
        match scope {
            Scope::Base => {
                f(self.weight.data());
                f(&self.bias);
            }
            Scope::Adapter => {
                if let Some(ad) = &self.adapter {
                    f(ad.b.data());
                    f(ad.a.data());
                    if ad.config.mode == AdapterMode::Dora {
                        f(&ad.magnitude);
                    }
                }
            }
        }
    }

    pub fn visit_mut(&mut self, scope: Scope, f: &mut dyn FnMut(&mut [f64])) {
        match scope {
            Scope::Base => {
                f(self.weight.data_mut());
                f(&mut self.bias);
            }
            Scope::Adapter => {
                if let Some(ad) = &mut self.adapter {
                    f(ad.b.data_mut());
                    f(ad.a.data_mut());
                    if ad.config.mode == AdapterMode::Dora {
                        f(&mut ad.magnitude);
                    }
                }
            }
        }
    }

    /// Writes `net/<layer>/{weight,bias}` and, when present, `adapter/<layer>/{B,A,m}`.
    pub fn export(&self, layer: &str, out: &mut TensorMap) {
        out.insert(format!("net/{layer}/weight"), self.weight.clone());
        out.insert(
            format!("net/{layer}/bias"),
            Matrix::from_vec(1, self.bias.len(), self.bias.clone()).expect("row vector"),
        );
        if let Some(ad) = &self.adapter {
            out.insert(format!("adapter/{layer}/B"), ad.b.clone());
            out.insert(format!("adapter/{layer}/A"), ad.a.clone());
            if ad.config.mode == AdapterMode::Dora {
                out.insert(
                    format!("adapter/{layer}/m"),
                    Matrix::from_vec(1, ad.magnitude.len(), ad.magnitude.clone()).expect("row"),
                );
            }
        }
    }

    /// Inverse of [`export`](Self::export). Adapter settings (α, flags) are
    /// taken from `config`; the mode is inferred from the presence of `m`.
    pub fn import(layer: &str, map: &TensorMap, config: Option<AdapterConfig>) -> Result<Self> {
        let get = |name: String| {
            map.get(&name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))
        };
        let weight = get(format!("net/{layer}/weight"))?;
        let bias = get(format!("net/{layer}/bias"))?.into_vec();
        let mut layer_out = Self::new(weight, bias)?;
        if let Ok(b) = get(format!("adapter/{layer}/B")) {
            let a = get(format!("adapter/{layer}/A"))?;
            let m = map.get(&format!("adapter/{layer}/m")).map(|m| m.data().to_vec());
            let mut cfg = config.unwrap_or_default();
            cfg.rank = b.cols();
            cfg.mode = if m.is_some() { AdapterMode::Dora } else { AdapterMode::Lora };
            if b.rows() != layer_out.out_dim() || a.cols() != layer_out.in_dim() || a.rows() != cfg.rank {
                return Err(Error::shape(format!("adapter factors for {layer}")));
            }
            layer_out.adapter = Some(Adapter {
                config: cfg,
                b,
                a,
                magnitude: m.unwrap_or_default(),
            });
        }
        Ok(layer_out)
    }
}

/// Trainable parameter count for a stack of `(in, out)` layers.
/// LoRA: `Σ r(in + out)`; DoRA adds `Σ out`.
pub fn param_count(dims: &[(usize, usize)], rank: usize, mode: AdapterMode) -> Result<u64> {
    if rank == 0 {
        return Err(Error::arg("rank must be at least 1"));
    }
    Ok(dims
        .iter()
        .map(|&(i, o)| {
            let lora = rank as u64 * (i as u64 + o as u64);
            match mode {
                AdapterMode::Lora => lora,
                AdapterMode::Dora => lora + o as u64,
            }
        })
        .sum())
}

/// Immutable copy of a network taken before preference training.
#[derive(Debug)]
pub struct ReferenceSnapshot<T>(Arc<T>);

impl<T> Clone for ReferenceSnapshot<T> {
    fn clone(&self) -> Self {
        Self(Arc::clone(&self.0))
    }
}

impl<T: Clone> ReferenceSnapshot<T> {
    pub fn capture(value: &T) -> Self {
        Self(Arc::new(value.clone()))
    }
}

impl<T> ReferenceSnapshot<T> {
    pub fn get(&self) -> &T {
        &self.0
    }
}
