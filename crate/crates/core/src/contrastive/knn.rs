//! Exact cosine k-NN retrieval and recall against label families.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::FrameLabel;
use crate::error::{Error, Result};
use crate::numkit::{dot, norm};

/// Temporal window of the same-task-and-nearby-time family.
pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    /// `recall[i]` pairs with `ks[i]` of the report.
    pub recall: Vec<f64>,
    /// Expected recall of uniformly random neighbors under the label marginals.
    pub random: Vec<f64>,
    /// Queries that have at least one positive in the corpus.
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub corpus: usize,
    pub ks: Vec<usize>,
    pub window: usize,
    pub same_task: Recall,
    pub same_episode: Recall,
    pub task_window: Recall,
}

fn normalized(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = embeddings.first().map_or(0, Vec::len);
    embeddings
        .iter()
        .enumerate()
        .map(|(row, e)| {
            if e.len() != dim {
                return Err(Error::shape(format!("embedding {row} has width {}, expected {dim}", e.len())));
            }
            let n = norm(e);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Singularity { row, norm: n });
            }
            Ok(e.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Higher similarity first, lower index on ties.
fn rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `k` most cosine-similar rows for every query, self excluded.
pub fn nearest_neighbors(embeddings: &[Vec<f64>], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = embeddings.len();
    if k == 0 || k >= n {
        return Err(Error::arg(format!("k = {k} must lie in 1..{n} for a corpus of {n}")));
    }
    let unit = normalized(embeddings)?;
    Ok((0..n)
        .into_par_iter()
        .map(|q| {
            let mut scored: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| (dot(&unit[q], &unit[j]), j))
                .collect();
            if k < scored.len() {
                scored.select_nth_unstable_by(k - 1, rank);
                scored.truncate(k);
            }
            scored.sort_unstable_by(rank);
            scored.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Chance that `k` draws without replacement from `pool` items, `hits` of
/// them positive, contain at least one positive.
pub fn random_hit_probability(pool: usize, hits: usize, k: usize) -> f64 {
    if hits == 0 {
        return 0.0;
    }
    if k + hits > pool {
        return 1.0;
    }
    let miss: f64 = (0..k).map(|j| (pool - hits - j) as f64 / (pool - j) as f64).product();
    1.0 - miss
}

fn family(
    neighbors: &[Vec<usize>],
    labels: &[FrameLabel],
    ks: &[usize],
    positive: impl Fn(&FrameLabel, &FrameLabel) -> bool + Sync,
) -> Recall {
    let n = labels.len();
    let per_query: Vec<Option<(Vec<bool>, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let hits = (0..n).filter(|&j| j != q && positive(&labels[q], &labels[j])).count();
            if hits == 0 {
                return None;
            }
            let first = neighbors[q].iter().position(|&j| positive(&labels[q], &labels[j]));
            let found = ks.iter().map(|&k| first.is_some_and(|p| p < k)).collect();
            let random = ks.iter().map(|&k| random_hit_probability(n - 1, hits, k)).collect();
            Some((found, random))
        })
        .collect();
    let scored: Vec<_> = per_query.into_iter().flatten().collect();
    let queries = scored.len();
    let mean = |f: &dyn Fn(&(Vec<bool>, Vec<f64>)) -> f64| {
        if queries == 0 {
            0.0
        } else {
            scored.iter().map(f).sum::<f64>() / queries as f64
        }
    };
    Recall {
        recall: (0..ks.len()).map(|i| mean(&|s| f64::from(u8::from(s.0[i])))).collect(),
        random: (0..ks.len()).map(|i| mean(&|s| s.1[i])).collect(),
        queries,
    }
}

pub fn knn_retrieval(embeddings: &[Vec<f64>], labels: &[FrameLabel], ks: &[usize], window: usize) -> Result<RecallReport> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape(format!("{} embeddings for {} labels", embeddings.len(), labels.len())));
    }
    let k_max = ks.iter().copied().max().ok_or_else(|| Error::arg("no k values requested"))?;
    if ks.contains(&0) {
        return Err(Error::arg("k must be at least 1"));
    }
    let neighbors = nearest_neighbors(embeddings, k_max)?;
    Ok(RecallReport {
        corpus: labels.len(),
        ks: ks.to_vec(),
        window,
        same_task: family(&neighbors, labels, ks, |a, b| a.same_task(b)),
        same_episode: family(&neighbors, labels, ks, |a, b| a.same_episode(b)),
        task_window: family(&neighbors, labels, ks, |a, b| a.same_task(b) && a.t.abs_diff(b.t) <= window),
    })
}
