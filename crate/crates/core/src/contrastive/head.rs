//! Two-layer projection head with L2-normalized output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, Parameterized, Scope};
use crate::numkit::{dot, norm, Matrix, RngState, TensorMap};

/// Norms below this are treated as a zero vector.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub feat: usize,
    pub mid: usize,
    pub emb: usize,
}

impl Default for HeadDims {
    fn default() -> Self {
        Self {
            feat: 1152,
            mid: 512,
            emb: 128,
        }
    }
}

impl HeadDims {
    pub fn param_count(&self) -> usize {
        self.feat * self.mid + self.mid + self.mid * self.emb + self.emb
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat == 0 || self.mid == 0 || self.emb == 0 {
            return Err(Error::Config(format!("head dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjHead {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    norm: f64,
    pub embedding: Vec<f64>,
}

/// Gradient accumulator laid out like the head's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl HeadGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.w1.data().len() + self.w2.data().len() + self.b1.len() + self.b2.len());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }
}

impl ProjHead {
    /// Uniform init in ±1/√fan_in for weights and biases.
    pub fn new(dims: HeadDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = RngState::new(seed);
        let k1 = 1.0 / (dims.feat as f64).sqrt();
        let k2 = 1.0 / (dims.mid as f64).sqrt();
        let w1 = Matrix::random_uniform(dims.mid, dims.feat, k1, &mut rng);
        let b1 = rng.uniform_vec(dims.mid).into_iter().map(|u| k1 * (2.0 * u - 1.0)).collect();
        let w2 = Matrix::random_uniform(dims.emb, dims.mid, k2, &mut rng);
        let b2 = rng.uniform_vec(dims.emb).into_iter().map(|u| k2 * (2.0 * u - 1.0)).collect();
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            feat: self.w1.cols(),
            mid: self.w1.rows(),
            emb: self.w2.rows(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.dims().param_count()
    }

    pub fn forward_traced(&self, feature: &[f64]) -> Result<HeadTrace> {
        let mut pre = self.w1.matvec(feature)?;
        for (p, b) in pre.iter_mut().zip(&self.b1) {
            *p += b;
        }
        let hidden: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let mut z = self.w2.matvec(&hidden)?;
        for (v, b) in z.iter_mut().zip(&self.b2) {
            *v += b;
        }
        let n = norm(&z);
        if !(n > NORM_FLOOR) {
            return Err(Error::Singularity { row: 0, norm: n });
        }
        let embedding = z.iter().map(|v| v / n).collect();
        Ok(HeadTrace {
            input: feature.to_vec(),
            pre,
            hidden,
            norm: n,
            embedding,
        })
    }

    /// Unit-norm embedding of one feature vector.
    pub fn project(&self, feature: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_traced(feature)?.embedding)
    }

    pub fn project_all(&self, features: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        features.par_iter().map(|f| self.project(f)).collect()
    }

    pub fn zero_grads(&self) -> HeadGrads {
        let d = self.dims();
        HeadGrads {
            w1: Matrix::zeros(d.mid, d.feat),
            b1: vec![0.0; d.mid],
            w2: Matrix::zeros(d.emb, d.mid),
            b2: vec![0.0; d.emb],
        }
    }

    /// Accumulates the parameter gradient given `d loss / d embedding`.
    pub fn backward(&self, trace: &HeadTrace, upstream: &[f64], grads: &mut HeadGrads) -> Result<()> {
        if upstream.len() != trace.embedding.len() {
            return Err(Error::shape(format!(
                "upstream gradient has {} entries, embedding has {}",
                upstream.len(),
                trace.embedding.len()
            )));
        }
        // Through the normalization: (g − e·(e·g)) / ‖z‖.
        let e = &trace.embedding;
        let eg = dot(e, upstream);
        let dz: Vec<f64> = upstream.iter().zip(e).map(|(g, ev)| (g - ev * eg) / trace.norm).collect();
        grads.w2.add_outer(1.0, &dz, &trace.hidden);
        for (b, d) in grads.b2.iter_mut().zip(&dz) {
            *b += d;
        }
        let dh = self.w2.tr_matvec(&dz)?;
        let dpre: Vec<f64> = dh.iter().zip(&trace.pre).map(|(g, &p)| g * gelu_grad(p)).collect();
        grads.w1.add_outer(1.0, &dpre, &trace.input);
        for (b, d) in grads.b1.iter_mut().zip(&dpre) {
            *b += d;
        }
        Ok(())
    }

    pub fn export(&self, out: &mut TensorMap) {
        let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector");
        out.insert("head/l1/weight".into(), self.w1.clone());
        out.insert("head/l1/bias".into(), row(&self.b1));
        out.insert("head/l2/weight".into(), self.w2.clone());
        out.insert("head/l2/bias".into(), row(&self.b2));
    }

    pub fn import(map: &TensorMap) -> Result<Self> {
        let get = |name: &str| {
            map.get(name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))
        };
        let w1 = get("head/l1/weight")?;
        let b1 = get("head/l1/bias")?.into_vec();
        let w2 = get("head/l2/weight")?;
        let b2 = get("head/l2/bias")?.into_vec();
        if b1.len() != w1.rows() || w2.cols() != w1.rows() || b2.len() != w2.rows() {
            return Err(Error::shape("projection head tensors disagree"));
        }
        Ok(Self { w1, b1, w2, b2 })
    }
}

impl Parameterized for ProjHead {
    fn visit_params(&self, scope: Scope, f: &mut dyn FnMut(&[f64])) {
        if scope == Scope::Base {
            f(self.w1.data());
            f(&self.b1);
            f(self.w2.data());
            f(&self.b2);
        }
    }

    fn visit_params_mut(&mut self, scope: Scope, f: &mut dyn FnMut(&mut [f64])) {
        if scope == Scope::Base {
            f(self.w1.data_mut());
            f(&mut self.b1);
            f(self.w2.data_mut());
            f(&mut self.b2);
        }
    }
}
