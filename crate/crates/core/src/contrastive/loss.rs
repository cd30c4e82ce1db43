//! Symmetric InfoNCE and the two-stream pretraining objective.

use super::head::{HeadGrads, ProjHead};
use super::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, log_sum_exp, softmax};
use crate::numkit::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    /// d loss / d emb_a, one row per sample.
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
    /// Set when the batch has a single row and there is nothing to contrast.
    pub degenerate: bool,
}

/// Cross-entropy over `emb_a · emb_bᵀ / τ`, averaged over both directions,
/// with matched rows as positives.
pub fn info_nce(emb_a: &[Vec<f64>], emb_b: &[Vec<f64>], tau: f64) -> Result<InfoNce> {
    let b = emb_a.len();
    if emb_b.len() != b {
        return Err(Error::shape(format!("{b} anchors against {} positives", emb_b.len())));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::arg(format!("temperature must be positive, got {tau}")));
    }
    let dim = emb_a.first().map_or(0, Vec::len);
    if emb_a.iter().chain(emb_b).any(|e| e.len() != dim) {
        return Err(Error::shape("embeddings have mixed widths"));
    }
    let zeros = || vec![vec![0.0; dim]; b];
    if b <= 1 {
        return Ok(InfoNce {
            loss: 0.0,
            grad_a: zeros(),
            grad_b: zeros(),
            degenerate: true,
        });
    }

    let logits: Vec<Vec<f64>> = emb_a
        .iter()
        .map(|a| emb_b.iter().map(|bv| dot(a, bv) / tau).collect())
        .collect();
    let column = |j: usize| -> Vec<f64> { logits.iter().map(|row| row[j]).collect() };

    let n = b as f64;
    let mut loss = 0.0;
    // d loss / d logits
    let mut ds = vec![vec![0.0; b]; b];
    for i in 0..b {
        loss += 0.5 * (log_sum_exp(&logits[i]) - logits[i][i]) / n;
        for (j, p) in softmax(&logits[i]).into_iter().enumerate() {
            ds[i][j] += 0.5 * p / n;
        }
        ds[i][i] -= 0.5 / n;
    }
    for j in 0..b {
        let col = column(j);
        loss += 0.5 * (log_sum_exp(&col) - col[j]) / n;
        for (i, p) in softmax(&col).into_iter().enumerate() {
            ds[i][j] += 0.5 * p / n;
        }
        ds[j][j] -= 0.5 / n;
    }

    let mut grad_a = zeros();
    let mut grad_b = zeros();
    for i in 0..b {
        for j in 0..b {
            let s = ds[i][j] / tau;
            for k in 0..dim {
                grad_a[i][k] += s * emb_b[j][k];
                grad_b[j][k] += s * emb_a[i][k];
            }
        }
    }
    Ok(InfoNce {
        loss,
        grad_a,
        grad_b,
        degenerate: false,
    })
}

/// One training example: agent and wrist views at `t`, and the agent view at
/// `t + Δ` when the episode is long enough.
#[derive(Debug, Clone, Copy)]
pub struct DualSample<'a> {
    pub agent: &'a [f64],
    pub wrist: &'a [f64],
    pub future: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct DualLoss {
    pub total: f64,
    pub mva: f64,
    pub tc: f64,
    /// Rows that entered the temporal stream.
    pub tc_rows: usize,
}

/// Objective only.
pub fn dual_loss(head: &ProjHead, batch: &[DualSample<'_>], cfg: &ContrastiveConfig) -> Result<DualLoss> {
    dual_loss_impl(head, batch, cfg, None)
}

/// Objective plus the gradient w.r.t. every head parameter.
pub fn dual_loss_with_grad(
    head: &ProjHead,
    batch: &[DualSample<'_>],
    cfg: &ContrastiveConfig,
) -> Result<(DualLoss, HeadGrads)> {
    let mut grads = head.zero_grads();
    let loss = dual_loss_impl(head, batch, cfg, Some(&mut grads))?;
    Ok((loss, grads))
}

fn dual_loss_impl(
    head: &ProjHead,
    batch: &[DualSample<'_>],
    cfg: &ContrastiveConfig,
    grads: Option<&mut HeadGrads>,
) -> Result<DualLoss> {
    cfg.validate()?;
    let trace_all = |xs: Vec<&[f64]>| -> Result<Vec<_>> { xs.into_iter().map(|x| head.forward_traced(x)).collect() };
    let agent = trace_all(batch.iter().map(|s| s.agent).collect())?;
    let wrist = trace_all(batch.iter().map(|s| s.wrist).collect())?;
    let tc_idx: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].future.is_some()).collect();
    let future = trace_all(tc_idx.iter().filter_map(|&i| batch[i].future).collect())?;

    let emb = |ts: &[super::head::HeadTrace]| -> Vec<Vec<f64>> { ts.iter().map(|t| t.embedding.clone()).collect() };
    let agent_emb = emb(&agent);
    let mva = info_nce(&agent_emb, &emb(&wrist), cfg.tau)?;
    let anchors: Vec<Vec<f64>> = tc_idx.iter().map(|&i| agent_emb[i].clone()).collect();
    let tc = info_nce(&anchors, &emb(&future), cfg.tau)?;
    let total = cfg.w_mva * mva.loss + cfg.w_tc * tc.loss;
    ensure_finite(&[total, mva.loss, tc.loss], "dual contrastive loss")?;

    if let Some(g) = grads {
        let mut upstream: Vec<Vec<f64>> = mva.grad_a.iter().map(|r| r.iter().map(|v| cfg.w_mva * v).collect()).collect();
        for (k, &i) in tc_idx.iter().enumerate() {
            for (u, v) in upstream[i].iter_mut().zip(&tc.grad_a[k]) {
                *u += cfg.w_tc * v;
            }
        }
        for (t, u) in agent.iter().zip(&upstream) {
            head.backward(t, u, g)?;
        }
        for (t, u) in wrist.iter().zip(&mva.grad_b) {
            let u: Vec<f64> = u.iter().map(|v| cfg.w_mva * v).collect();
            head.backward(t, &u, g)?;
        }
        for (t, u) in future.iter().zip(&tc.grad_b) {
            let u: Vec<f64> = u.iter().map(|v| cfg.w_tc * v).collect();
            head.backward(t, &u, g)?;
        }
    }
    Ok(DualLoss {
        total,
        mva: mva.loss,
        tc: tc.loss,
        tc_rows: tc_idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::head::HeadDims;
    use super::*;
    use crate::nn::{Parameterized, Scope};
    use crate::numkit::{finite_diff_grad, norm, rel_error, RngState};
    use proptest::prelude::*;

    fn basis(b: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..b)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i] = 1.0;
                v
            })
            .collect()
    }

    fn unit(rng: &mut RngState, dim: usize) -> Vec<f64> {
        let v = rng.gaussian_vec(dim);
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn aligned_orthogonal_batch() {
        let e = basis(8, 8);
        let out = info_nce(&e, &e, 0.07).unwrap();
        let expect = (1.0 + 7.0 * (-1.0f64 / 0.07).exp()).ln();
        assert!((out.loss - expect).abs() < 1e-12);
        assert!(out.loss < 1e-5);
    }

    #[test]
    fn identical_embeddings_give_ln_b() {
        let e = vec![vec![0.6, 0.8]; 128];
        let out = info_nce(&e, &e, 0.07).unwrap();
        assert!((out.loss - 128f64.ln()).abs() < 1e-12);
        assert!((out.loss - 4.852).abs() < 1e-3);
    }

    #[test]
    fn single_row_is_degenerate() {
        let e = vec![vec![1.0, 0.0]];
        let out = info_nce(&e, &e, 0.07).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.degenerate);
        assert!(info_nce(&e, &basis(2, 2), 0.07).is_err());
        assert!(info_nce(&e, &e, 0.0).is_err());
    }

    #[test]
    fn info_nce_gradient_matches_differences() {
        let mut rng = RngState::new(4);
        let a: Vec<Vec<f64>> = (0..5).map(|_| rng.gaussian_vec(3)).collect();
        let b: Vec<Vec<f64>> = (0..5).map(|_| rng.gaussian_vec(3)).collect();
        let out = info_nce(&a, &b, 0.5).unwrap();
        let flat: Vec<f64> = a.iter().chain(&b).flatten().copied().collect();
        let f = |p: &[f64]| {
            let rows: Vec<Vec<f64>> = p.chunks(3).map(<[f64]>::to_vec).collect();
            info_nce(&rows[..5], &rows[5..], 0.5).unwrap().loss
        };
        let fd = finite_diff_grad(f, &flat, 1e-6).unwrap();
        let analytic: Vec<f64> = out.grad_a.iter().chain(&out.grad_b).flatten().copied().collect();
        assert!(rel_error(&analytic, &fd) < 1e-6);
    }

    fn batch_data(rng: &mut RngState, b: usize, feat: usize) -> Vec<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> {
        (0..b)
            .map(|i| {
                let fut = (i % 3 != 0).then(|| rng.gaussian_vec(feat));
                (rng.gaussian_vec(feat), rng.gaussian_vec(feat), fut)
            })
            .collect()
    }

    fn view(data: &[(Vec<f64>, Vec<f64>, Option<Vec<f64>>)]) -> Vec<DualSample<'_>> {
        data.iter()
            .map(|(a, w, f)| DualSample {
                agent: a,
                wrist: w,
                future: f.as_deref(),
            })
            .collect()
    }

    #[test]
    fn dual_gradient_matches_differences() {
        let dims = HeadDims { feat: 12, mid: 8, emb: 4 };
        let cfg = ContrastiveConfig::default();
        for seed in 1..=3 {
            let head = ProjHead::new(dims, seed).unwrap();
            let mut rng = RngState::new(seed + 50);
            let data = batch_data(&mut rng, 4, 12);
            let batch = view(&data);
            let (_, g) = dual_loss_with_grad(&head, &batch, &cfg).unwrap();
            let theta = head.flat_params(Scope::Base);
            let fd = finite_diff_grad(
                |p| {
                    let mut h = head.clone();
                    h.set_flat_params(Scope::Base, p).unwrap();
                    dual_loss(&h, &batch, &cfg).unwrap().total
                },
                &theta,
                1e-6,
            )
            .unwrap();
            let err = rel_error(&g.flat(), &fd);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn weights_combine_linearly() {
        let head = ProjHead::new(HeadDims { feat: 6, mid: 5, emb: 3 }, 2).unwrap();
        let mut rng = RngState::new(8);
        let data = batch_data(&mut rng, 6, 6);
        let batch = view(&data);
        let both = dual_loss(&head, &batch, &ContrastiveConfig::default()).unwrap();
        assert!((both.total - 0.5 * (both.mva + both.tc)).abs() < 1e-12);
        assert_eq!(both.tc_rows, 4);
        let cfg = ContrastiveConfig {
            w_tc: 0.0,
            ..ContrastiveConfig::default()
        };
        let only = dual_loss(&head, &batch, &cfg).unwrap();
        assert_eq!(only.total, 0.5 * only.mva);
    }

    proptest! {
        #[test]
        fn nonnegative_and_symmetric(seed in 0u64..500, b in 2usize..9, tau in 0.05..2.0f64) {
            let mut rng = RngState::new(seed);
            let a: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 4)).collect();
            let c: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 4)).collect();
            let ab = info_nce(&a, &c, tau).unwrap().loss;
            let ba = info_nce(&c, &a, tau).unwrap().loss;
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn equal_similarities_give_ln_b(seed in 0u64..500, b in 2usize..40) {
            let mut rng = RngState::new(seed);
            let e = vec![unit(&mut rng, 5); b];
            let l = info_nce(&e, &e, 0.07).unwrap().loss;
            prop_assert!((l - (b as f64).ln()).abs() < 1e-9);
        }
    }
}
