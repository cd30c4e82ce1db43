//! Multi-view and temporal contrastive pretraining of a projection head,
//! with k-NN retrieval evaluation.

pub mod data;
pub mod head;
pub mod knn;
pub mod loss;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{gen_synthetic_frames, FrameLabel, FrameRecord, FrameSet, SyntheticConfig, SyntheticWorld};
pub use head::{HeadDims, HeadGrads, HeadTrace, ProjHead};
pub use knn::{knn_retrieval, nearest_neighbors, random_hit_probability, Recall, RecallReport, DEFAULT_WINDOW};
pub use loss::{dual_loss, dual_loss_with_grad, info_nce, DualLoss, DualSample, InfoNce};
pub use train::{embed_frames, steps_per_epoch, train_pretrain, LossCurve, PretrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub w_mva: f64,
    pub w_tc: f64,
    pub batch: usize,
    /// Temporal offset between anchor and positive, in steps.
    pub delta: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            w_mva: 0.5,
            w_tc: 0.5,
            batch: 128,
            delta: 5,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.w_mva >= 0.0 && self.w_tc >= 0.0 && self.w_mva.is_finite() && self.w_tc.is_finite()) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        if self.batch < 2 {
            return Err(Error::Config(format!("batch must hold at least 2 rows, got {}", self.batch)));
        }
        Ok(())
    }
}
