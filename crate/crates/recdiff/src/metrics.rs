//! Top-N ranking metrics under the all-ranking protocol: every catalog
//! item is scored per user, already-seen items are masked out, and
//! Recall@N / NDCG@N are macro-averaged over users with test items.

use std::collections::BTreeMap;
use std::collections::HashSet;

use ndarray::s;

use crate::error::Result;
use crate::model::EvalEmbeddings;

/// Per-cutoff recall/ndcg pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    pub per_n: BTreeMap<usize, MetricPair>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPair {
    pub recall: f64,
    pub ndcg: f64,
}

impl MetricSet {
    pub fn recall(&self, n: usize) -> f64 {
        self.per_n.get(&n).map(|m| m.recall).unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, n: usize) -> f64 {
        self.per_n.get(&n).map(|m| m.ndcg).unwrap_or(f64::NAN)
    }
}

/// Recall@N: fraction of the relevant set found in the top N.
/// The ranked list must already exclude masked items.
pub fn recall_at_n(ranked: &[usize], relevant: &HashSet<usize>, n: usize) -> f64 {
    if relevant.is_empty() {
        return f64::NAN;
    }
    let hits = ranked.iter().take(n).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

/// NDCG@N with binary gains: DCG uses 1/log2(rank+1) with ranks starting
/// at 1; IDCG places min(N, |relevant|) hits at the top.
pub fn ndcg_at_n(ranked: &[usize], relevant: &HashSet<usize>, n: usize) -> f64 {
    if relevant.is_empty() {
        return f64::NAN;
    }
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(n).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal_hits = relevant.len().min(n);
    let idcg: f64 = (0..ideal_hits).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Top-k item ids by (score desc, id asc), excluding masked items.
/// Ties in score break deterministically toward the smaller id.
pub fn rank_top_k(scores: &[f64], masked: &[bool], k: usize) -> Vec<usize> {
    let mut candidates: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !masked[*i])
        .map(|(i, &s)| (s, i))
        .collect();
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.partial_cmp(&a.0).expect("finite scores").then(a.1.cmp(&b.1))
    };
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    candidates.into_iter().map(|(_, i)| i).collect()
}

/// Score all items for every user with held-out items, mask the given
/// per-user lists, and macro-average Recall@N / NDCG@N. Users with an
/// empty held-out set are excluded from the mean.
pub fn evaluate_all_rank(
    emb: &EvalEmbeddings,
    heldout: &[Vec<usize>],
    masked: &[Vec<usize>],
    ns: &[usize],
) -> Result<(MetricSet, usize)> {
    let num_items = emb.item_vecs.nrows();
    let max_n = ns.iter().copied().max().unwrap_or(0);
    let mut sums: BTreeMap<usize, (f64, f64)> = ns.iter().map(|&n| (n, (0.0, 0.0))).collect();
    let mut users_evaluated = 0usize;

    let eval_users: Vec<usize> =
        (0..heldout.len()).filter(|&u| !heldout[u].is_empty()).collect();
    let chunk = 512;
    let mut mask_buf = vec![false; num_items];
    for block in eval_users.chunks(chunk) {
        // gemm over the block keeps the scoring cache-friendly
        let mut user_block = ndarray::Array2::zeros((block.len(), emb.user_vecs.ncols()));
        for (r, &u) in block.iter().enumerate() {
            user_block.row_mut(r).assign(&emb.user_vecs.row(u));
        }
        let scores_block = user_block.dot(&emb.item_vecs.t());
        for (r, &u) in block.iter().enumerate() {
            for &m in &masked[u] {
                mask_buf[m] = true;
            }
            let scores = scores_block.slice(s![r, ..]);
            let ranked = rank_top_k(scores.as_slice().expect("contiguous"), &mask_buf, max_n);
            let relevant: HashSet<usize> = heldout[u].iter().copied().collect();
            debug_assert!(ranked.iter().all(|i| !masked[u].contains(i)));
            for &n in ns {
                let e = sums.get_mut(&n).expect("cutoff present");
                e.0 += recall_at_n(&ranked, &relevant, n);
                e.1 += ndcg_at_n(&ranked, &relevant, n);
            }
            users_evaluated += 1;
            for &m in &masked[u] {
                mask_buf[m] = false;
            }
        }
    }

    let denom = users_evaluated.max(1) as f64;
    let per_n = sums
        .into_iter()
        .map(|(n, (r, g))| (n, MetricPair { recall: r / denom, ndcg: g / denom }))
        .collect();
    Ok((MetricSet { per_n }, users_evaluated))
}
