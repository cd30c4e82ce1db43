//! Projection-head pretraining and retrieval evaluation.

use std::path::Path;

use serde::Serialize;
use vla_lab::contrastive::{
    dual_loss, embed_frames, gen_synthetic_frames, knn_retrieval, train_pretrain, DualSample, FrameSet, HeadDims,
    LossCurve, PretrainConfig, ProjHead, Recall, RecallReport,
};
use vla_lab::numkit::{derive_seed, RngState, TensorMap};

use super::common::{save_checkpoint, write_csv, write_json};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::results::Recorder;

const HEAD_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const PROBE_STREAM: u64 = 2;
const RANDOM_EMB_STREAM: u64 = 3;

pub fn frames(cfg: &ExperimentConfig) -> Result<FrameSet> {
    Ok(gen_synthetic_frames(cfg.section(&cfg.synthetic, "synthetic")?)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainMetrics {
    pub seed: u64,
    pub params: usize,
    pub steps: usize,
    pub ln_b: f64,
    pub init_total: f64,
    pub init_mva: f64,
    pub init_tc: f64,
    pub final_total: f64,
    /// Fraction of the distance from `ln B` to zero that training removed.
    pub recovery: f64,
    pub mva_exceeds_tc: bool,
}

fn head_and_config(cfg: &ExperimentConfig, frames: &FrameSet, seed: u64) -> Result<(ProjHead, PretrainConfig)> {
    let p = cfg.section(&cfg.pretrain, "pretrain")?;
    let dims = HeadDims {
        feat: frames.config.feat_dim,
        mid: p.mid,
        emb: p.emb,
    };
    let head = ProjHead::new(dims, derive_seed(seed, HEAD_STREAM))?;
    let pc = PretrainConfig {
        loss: p.loss,
        epochs: p.epochs,
        peak_lr: p.peak_lr,
        ..PretrainConfig::default()
    };
    Ok((head, pc))
}

/// Loss of the untrained head on one random batch.
fn probe(head: &ProjHead, frames: &FrameSet, pc: &PretrainConfig, seed: u64) -> Result<vla_lab::contrastive::DualLoss> {
    let mut idx: Vec<usize> = (0..frames.len()).collect();
    RngState::new(derive_seed(seed, PROBE_STREAM)).shuffle(&mut idx);
    let batch: Vec<DualSample<'_>> = idx
        .iter()
        .take(pc.loss.batch)
        .map(|&i| {
            let r = &frames.records[i];
            DualSample {
                agent: &r.agent,
                wrist: &r.wrist,
                future: r.future_agent.as_deref(),
            }
        })
        .collect();
    Ok(dual_loss(head, &batch, &pc.loss)?)
}

fn write_curve(path: &Path, c: &LossCurve) -> Result<()> {
    let rows = (0..c.len()).map(|i| vec![i.to_string(), c.total[i].to_string(), c.mva[i].to_string(), c.tc[i].to_string(), c.lr[i].to_string()]);
    write_csv(path, &["step", "total", "mva", "tc", "lr"], rows)
}

pub(super) fn pretrain(cfg: &ExperimentConfig, frames: &FrameSet, seed: u64, dir: &Path) -> Result<(ProjHead, ProjHead, PretrainMetrics)> {
    let (mut head, pc) = head_and_config(cfg, frames, seed)?;
    let untrained = head.clone();
    let init = probe(&head, frames, &pc, seed)?;
    let curve = train_pretrain(&mut head, frames, &pc, derive_seed(seed, SHUFFLE_STREAM))?;
    write_curve(&dir.join("loss_curve.csv"), &curve)?;
    let mut map = TensorMap::new();
    head.export(&mut map);
    save_checkpoint(&dir.join("proj_head.ckpt"), &map)?;
    let ln_b = (pc.loss.batch as f64).ln();
    let final_total = curve.total.last().copied().unwrap_or(init.total);
    let m = PretrainMetrics {
        seed,
        params: head.param_count(),
        steps: curve.len(),
        ln_b,
        init_total: init.total,
        init_mva: init.mva,
        init_tc: init.tc,
        final_total,
        recovery: (ln_b - final_total) / ln_b,
        mva_exceeds_tc: curve.mva_exceeds_tc(),
    };
    write_json(&dir.join("metrics.json"), &m)?;
    Ok((untrained, head, m))
}

pub fn pretrain_seed(cfg: &ExperimentConfig, frames: &FrameSet, seed: u64, dir: &Path, rec: &mut Recorder) -> Result<PretrainMetrics> {
    let (_, _, m) = pretrain(cfg, frames, seed, dir)?;
    rec.value("pretrain", "dual loss", "init", m.init_total);
    rec.value("pretrain", "dual loss", "final", m.final_total);
    rec.value("pretrain", "dual loss", "recovery", m.recovery);
    rec.value("pretrain", "dual loss", "mva > tc", f64::from(u8::from(m.mva_exceeds_tc)));
    Ok(m)
}

fn random_embeddings(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngState::new(seed);
    (0..n).map(|_| rng.gaussian_vec(dim)).collect()
}

pub fn knn_seed(cfg: &ExperimentConfig, frames: &FrameSet, seed: u64, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let k = cfg.section(&cfg.knn, "knn")?;
    let (untrained, trained, _) = pretrain(cfg, frames, seed, dir)?;
    let labels = frames.labels();
    let emb_dim = trained.dims().emb;
    let reports: Vec<(&str, RecallReport)> = vec![
        ("pretrained", knn_retrieval(&embed_frames(&trained, frames)?, &labels, &k.ks, k.window)?),
        ("untrained", knn_retrieval(&embed_frames(&untrained, frames)?, &labels, &k.ks, k.window)?),
        (
            "random",
            knn_retrieval(&random_embeddings(frames.len(), emb_dim, derive_seed(seed, RANDOM_EMB_STREAM)), &labels, &k.ks, k.window)?,
        ),
    ];
    let mut rows = Vec::new();
    for (name, r) in &reports {
        let families: [(&str, &Recall); 3] = [
            ("same-task", &r.same_task),
            ("same-episode", &r.same_episode),
            ("task-window", &r.task_window),
        ];
        for (fam, recall) in families {
            for (i, kk) in r.ks.iter().enumerate() {
                rows.push(vec![
                    (*name).to_owned(),
                    fam.to_owned(),
                    kk.to_string(),
                    recall.recall[i].to_string(),
                    recall.random[i].to_string(),
                ]);
                rec.value(&format!("recall@{kk}"), fam, name, recall.recall[i]);
                if *name == "pretrained" {
                    rec.value(&format!("recall@{kk}"), fam, "chance", recall.random[i]);
                }
            }
        }
    }
    write_csv(&dir.join("recall.csv"), &["embedding", "family", "k", "recall", "chance"], rows)?;
    let json: Vec<_> = reports.iter().map(|(n, r)| serde_json::json!({ "embedding": n, "report": r })).collect();
    write_json(&dir.join("recall.json"), &json)
}
