use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Recall at k for k ∈ {1, 5, 10}.
    pub r_at: BTreeMap<usize, f64>,
    pub map_score: f64,
    pub n_queries: usize,
}

impl Metrics {
    pub fn r(&self, k: usize) -> f64 {
        self.r_at.get(&k).copied().unwrap_or(0.0)
    }
}

/// Average precision of one ranking over the full list.
pub fn average_precision(ranking: &[usize], relevant: &BTreeSet<usize>) -> f64 {
    let mut hits = 0;
    let mut sum = 0.0;
    for (pos, id) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if relevant.is_empty() {
        0.0
    } else {
        sum / relevant.len() as f64
    }
}

/// 1-based rank of the first relevant item, if any.
pub fn first_hit(ranking: &[usize], relevant: &BTreeSet<usize>) -> Option<usize> {
    ranking.iter().position(|id| relevant.contains(id)).map(|p| p + 1)
}

/// R@k and mAP; queries without relevant items are skipped with a warning.
pub fn metrics_from_rankings(rankings: &[Vec<usize>], relevant: &[BTreeSet<usize>]) -> Metrics {
    assert_eq!(rankings.len(), relevant.len(), "one relevance set per query");
    let mut counted = 0;
    let mut hits = [0usize; RECALL_KS.len()];
    let mut ap_sum = 0.0;
    for (q, (ranking, rel)) in rankings.iter().zip(relevant).enumerate() {
        if rel.is_empty() {
            log::warn!("query {q} has no relevant gallery item; excluded");
            continue;
        }
        counted += 1;
        let first = first_hit(ranking, rel);
        for (slot, &k) in RECALL_KS.iter().enumerate() {
            if first.is_some_and(|r| r <= k) {
                hits[slot] += 1;
            }
        }
        ap_sum += average_precision(ranking, rel);
    }
    let denom = counted.max(1) as f64;
    Metrics {
        r_at: RECALL_KS.iter().zip(hits).map(|(&k, h)| (k, h as f64 / denom)).collect(),
        map_score: ap_sum / denom,
        n_queries: counted,
    }
}

/// Gallery ids by descending score, ties by ascending id.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// Metrics of a `queries × gallery` score matrix.
pub fn metrics_from_scores(scores: &Tensor, relevant: &[BTreeSet<usize>]) -> Metrics {
    let rankings: Vec<Vec<usize>> = (0..scores.rows()).map(|q| rank_by_score(scores.row_slice(q))).collect();
    metrics_from_rankings(&rankings, relevant)
}
