//! Shared building blocks for the toy networks.

use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Which parameters a training loop may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scope {
    /// Base weights and biases (supervised pre-fitting, no adapters attached).
    Base,
    /// Adapter factors and magnitudes only; base weights frozen.
    Adapter,
}

/// Flat view over trainable tensors, visited in a fixed order.
pub trait Parameterized {
    fn visit_params(&self, scope: Scope, f: &mut dyn FnMut(&[f64]));
    fn visit_params_mut(&mut self, scope: Scope, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self, scope: Scope) -> usize {
        let mut n = 0;
        self.visit_params(scope, &mut |p| n += p.len());
        n
    }

    fn flat_params(&self, scope: Scope) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(scope, &mut |p| out.extend_from_slice(p));
        out
    }

    fn set_flat_params(&mut self, scope: Scope, values: &[f64]) -> Result<()> {
        let expected = self.num_params(scope);
        if values.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} parameters, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        self.visit_params_mut(scope, &mut |p| {
            p.copy_from_slice(&values[offset..offset + p.len()]);
            offset += p.len();
        });
        Ok(())
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub(crate) fn ensure_finite(values: &[f64], context: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            context: context.to_owned(),
        }),
        None => Ok(()),
    }
}


/// Supervised fitting schedule shared by the backbones.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}
