//! Mini-batch pretraining of the projection head.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::FrameSet;
use super::head::ProjHead;
use super::loss::{dual_loss_with_grad, DualSample};
use super::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::nn::{Parameterized, Scope};
use crate::numkit::RngState;
use crate::optim::{cosine_decay, Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub loss: ContrastiveConfig,
    pub epochs: usize,
    pub peak_lr: f64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: ContrastiveConfig::default(),
            epochs: 10,
            peak_lr: 3e-4,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub total: Vec<f64>,
    pub mva: Vec<f64>,
    pub tc: Vec<f64>,
    pub lr: Vec<f64>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    /// Whether the cross-view loss stays above the temporal one at every step.
    pub fn mva_exceeds_tc(&self) -> bool {
        self.mva.iter().zip(&self.tc).all(|(m, t)| m > t)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "step,total,mva,tc,lr")?;
        for i in 0..self.len() {
            writeln!(out, "{i},{},{},{},{}", self.total[i], self.mva[i], self.tc[i], self.lr[i])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Steps per epoch; a trailing partial batch is dropped.
pub fn steps_per_epoch(frames: usize, batch: usize) -> usize {
    frames / batch.max(1)
}

pub fn train_pretrain(head: &mut ProjHead, frames: &FrameSet, cfg: &PretrainConfig, seed: u64) -> Result<LossCurve> {
    cfg.loss.validate()?;
    if cfg.loss.delta != frames.config.temporal_offset {
        return Err(Error::Config(format!(
            "loss expects temporal offset {}, frames carry {}",
            cfg.loss.delta, frames.config.temporal_offset
        )));
    }
    if frames.config.feat_dim != head.dims().feat {
        return Err(Error::shape(format!(
            "frames have {} features, head expects {}",
            frames.config.feat_dim,
            head.dims().feat
        )));
    }
    let b = cfg.loss.batch;
    if frames.len() < b {
        return Err(Error::arg(format!("{} frames cannot fill a batch of {b}", frames.len())));
    }
    if !(cfg.peak_lr >= 0.0 && cfg.peak_lr.is_finite()) {
        return Err(Error::Config(format!("peak lr {} is invalid", cfg.peak_lr)));
    }
    let per_epoch = steps_per_epoch(frames.len(), b);
    let total_steps = per_epoch * cfg.epochs;
    let mut opt = Adam::new(head.num_params(Scope::Base), cfg.adam);
    let mut rng = RngState::new(seed);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut curve = LossCurve::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks_exact(b) {
            let batch: Vec<DualSample<'_>> = chunk
                .iter()
                .map(|&i| {
                    let r = &frames.records[i];
                    DualSample {
                        agent: &r.agent,
                        wrist: &r.wrist,
                        future: r.future_agent.as_deref(),
                    }
                })
                .collect();
            let (loss, grads) = dual_loss_with_grad(head, &batch, &cfg.loss).map_err(|e| Error::Training {
                step,
                reason: e.to_string(),
            })?;
            let lr = cosine_decay(step, total_steps, cfg.peak_lr);
            let mut theta = head.flat_params(Scope::Base);
            opt.step(&mut theta, &grads.flat(), lr);
            head.set_flat_params(Scope::Base, &theta)?;
            curve.total.push(loss.total);
            curve.mva.push(loss.mva);
            curve.tc.push(loss.tc);
            curve.lr.push(lr);
            step += 1;
        }
    }
    Ok(curve)
}

/// Agent-view embeddings of every frame, in record order.
pub fn embed_frames(head: &ProjHead, frames: &FrameSet) -> Result<Vec<Vec<f64>>> {
    let views: Vec<&[f64]> = frames.records.iter().map(|r| r.agent.as_slice()).collect();
    head.project_all(&views)
}

#[cfg(test)]
mod tests {
    use super::super::data::{gen_synthetic_frames, SyntheticConfig};
    use super::super::head::HeadDims;
    use super::*;

    fn tiny() -> (FrameSet, PretrainConfig) {
        let data = SyntheticConfig {
            suites: 2,
            tasks_per_suite: 3,
            episodes_per_task: 2,
            anchors_per_episode: 10,
            feat_dim: 16,
            ..SyntheticConfig::default()
        };
        let cfg = PretrainConfig {
            loss: ContrastiveConfig {
                batch: 32,
                ..ContrastiveConfig::default()
            },
            epochs: 3,
            ..PretrainConfig::default()
        };
        (gen_synthetic_frames(&data).unwrap(), cfg)
    }

    #[test]
    fn schedule_and_log_shape() {
        let (frames, cfg) = tiny();
        let mut head = ProjHead::new(HeadDims { feat: 16, mid: 16, emb: 8 }, 1).unwrap();
        let curve = train_pretrain(&mut head, &frames, &cfg, 2).unwrap();
        assert_eq!(curve.len(), 3 * (120 / 32));
        assert_eq!(curve.lr[0], 3e-4);
        assert!(curve.lr.windows(2).all(|w| w[1] <= w[0]));
        assert!(curve.total.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic_given_seed() {
        let (frames, cfg) = tiny();
        let dims = HeadDims { feat: 16, mid: 16, emb: 8 };
        let run = |seed| {
            let mut head = ProjHead::new(dims, 1).unwrap();
            let c = train_pretrain(&mut head, &frames, &cfg, seed).unwrap();
            (c, head)
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5).0, run(6).0);
    }

    #[test]
    fn rejects_mismatches() {
        let (frames, cfg) = tiny();
        let mut wrong = ProjHead::new(HeadDims { feat: 8, mid: 4, emb: 2 }, 1).unwrap();
        assert!(train_pretrain(&mut wrong, &frames, &cfg, 0).is_err());
        let mut head = ProjHead::new(HeadDims { feat: 16, mid: 4, emb: 2 }, 1).unwrap();
        let bad = PretrainConfig {
            loss: ContrastiveConfig { delta: 3, ..cfg.loss },
            ..cfg
        };
        assert!(train_pretrain(&mut head, &frames, &bad, 0).is_err());
        let big = PretrainConfig {
            loss: ContrastiveConfig { batch: 500, ..cfg.loss },
            ..cfg
        };
        assert!(train_pretrain(&mut head, &frames, &big, 0).is_err());
    }
}
