//! Full-ranking top-K evaluation and connecting-strength statistics.

use std::cmp::Ordering;

use log::info;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{HgclError, Result};
use crate::finetune::HgclModel;
use crate::graph::BipartiteGraph;
use crate::matrix::{dot, Matrix};

/// User-item scoring for ranking.
pub trait Scorer: Sync {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;
    fn score(&self, user: usize, item: usize) -> f64;

    fn score_all(&self, user: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.num_items()).map(|i| self.score(user, i)));
    }
}

/// `score(u, i) = users[u] · items[i]`.
#[derive(Clone, Debug)]
pub struct DotScorer {
    pub users: Matrix,
    pub items: Matrix,
}

impl DotScorer {
    /// Scorer over a stacked `[users; items]` pooled table.
    pub fn from_pooled(pooled: &Matrix, m: usize) -> Self {
        DotScorer {
            users: pooled.slice_rows(0, m),
            items: pooled.slice_rows(m, pooled.rows()),
        }
    }

    /// Scorer whose item rows are `e_j + e_{cluster(j)}`.
    pub fn from_model(model: &HgclModel) -> Self {
        let n = model.num_items();
        let mut items = Matrix::zeros(n, model.dim());
        for j in 0..n {
            items.row_mut(j).copy_from_slice(&model.item_vector(j));
        }
        DotScorer {
            users: model.pooled_user.clone(),
            items,
        }
    }
}

impl Scorer for DotScorer {
    fn num_users(&self) -> usize {
        self.users.rows()
    }

    fn num_items(&self) -> usize {
        self.items.rows()
    }

    fn score(&self, user: usize, item: usize) -> f64 {
        dot(self.users.row(user), self.items.row(item))
    }
}

/// Descending score, ties by ascending id.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top-`k` items by score, skipping `exclude` (sorted ascending). Returns
/// every remaining item when fewer than `k` remain.
pub fn rank_items(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        cand.truncate(k);
    }
    cand.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    cand
}

/// `|topk ∩ relevant| / |relevant|`; `None` when `relevant` is empty.
pub fn recall_at_k(topk: &[usize], relevant: &[usize]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = topk.iter().filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG over the first `k` entries of `topk`.
pub fn ndcg_at_k(topk: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = topk
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..relevant.len().min(k))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    Some(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    /// Users with at least one test item, ascending.
    pub per_user: Vec<UserMetrics>,
    pub skipped_users: usize,
}

/// Averages Recall@k and NDCG@k over users with test items. Training items
/// are excluded from each user's ranking. `threads > 1` evaluates users on a
/// worker pool; the report does not depend on the worker count.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    train: &BipartiteGraph,
    test: &BipartiteGraph,
    k: usize,
    threads: usize,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(HgclError::InvalidArgument("k must be >= 1".into()));
    }
    if test.edge_count() == 0 {
        return Err(HgclError::InvalidArgument("test set is empty".into()));
    }
    if train.m != test.m || train.n != test.n {
        return Err(HgclError::Dimension("train and test id spaces differ".into()));
    }
    if scorer.num_users() != train.m || scorer.num_items() != train.n {
        return Err(HgclError::Dimension(format!(
            "scorer is {}x{}, graph is {}x{}",
            scorer.num_users(),
            scorer.num_items(),
            train.m,
            train.n
        )));
    }
    let users: Vec<usize> = (0..test.m).filter(|&u| !test.items_of(u).is_empty()).collect();
    let per_user_metric = |buf: &mut Vec<f64>, u: usize| {
        scorer.score_all(u, buf);
        let relevant = test.items_of(u);
        let top = rank_items(buf, train.items_of(u), k);
        UserMetrics {
            user: u,
            recall: recall_at_k(&top, relevant).unwrap_or(0.0),
            ndcg: ndcg_at_k(&top, relevant, k).unwrap_or(0.0),
        }
    };
    let per_user: Vec<UserMetrics> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| HgclError::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| {
            users
                .par_iter()
                .map_init(Vec::new, |buf, &u| per_user_metric(buf, u))
                .collect()
        })
    } else {
        let mut buf = Vec::new();
        users.iter().map(|&u| per_user_metric(&mut buf, u)).collect()
    };
    let skipped = test.m - per_user.len();
    if skipped > 0 {
        info!("{skipped} users without test items excluded from the averages");
    }
    let count = per_user.len() as f64;
    let recall = per_user.iter().map(|r| r.recall).sum::<f64>() / count;
    let ndcg = per_user.iter().map(|r| r.ndcg).sum::<f64>() / count;
    Ok(EvalReport {
        k,
        recall,
        ndcg,
        per_user,
        skipped_users: skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|b| lo + width * b as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = if width > 0.0 {
                (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrengthSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub hist: Histogram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrengthStats {
    pub train_pos: StrengthSummary,
    pub test_pos: StrengthSummary,
    pub negatives: StrengthSummary,
}

fn summarize(values: &[f64], lo: f64, hi: f64, bins: usize) -> StrengthSummary {
    let count = values.len();
    let (mean, std) = if count == 0 {
        (0.0, 0.0)
    } else {
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        (mean, var.sqrt())
    };
    StrengthSummary {
        count,
        mean,
        std,
        hist: Histogram::new(values, lo, hi, bins),
    }
}

/// Scores of positive train and test pairs and of `neg_per_user` items drawn
/// uniformly from the whole item set for every user. All three histograms
/// share one set of edges.
pub fn strength_stats<S: Scorer + ?Sized, R: Rng>(
    scorer: &S,
    train: &BipartiteGraph,
    test: Option<&BipartiteGraph>,
    neg_per_user: usize,
    bins: usize,
    rng: &mut R,
) -> StrengthStats {
    let train_pos: Vec<f64> = train.edges().map(|(u, i)| scorer.score(u, i)).collect();
    let test_pos: Vec<f64> = test
        .map(|t| t.edges().map(|(u, i)| scorer.score(u, i)).collect())
        .unwrap_or_default();
    let mut negatives = Vec::with_capacity(train.m * neg_per_user);
    if train.n > 0 {
        for u in 0..train.m {
            for _ in 0..neg_per_user {
                negatives.push(scorer.score(u, rng.random_range(0..train.n)));
            }
        }
    }
    let all = train_pos.iter().chain(&test_pos).chain(&negatives);
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo > hi {
        (lo, hi) = (0.0, 0.0);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    StrengthStats {
        train_pos: summarize(&train_pos, lo, hi, bins),
        test_pos: summarize(&test_pos, lo, hi, bins),
        negatives: summarize(&negatives, lo, hi, bins),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranking_examples() {
        let s = [3.0, 1.0, 2.0];
        assert_eq!(rank_items(&s, &[], 2), vec![0, 2]);
        assert_eq!(rank_items(&s, &[0], 2), vec![2, 1]);
        assert_eq!(rank_items(&s, &[0], 5), vec![2, 1]);
        assert_eq!(rank_items(&[1.0, 1.0, 1.0], &[], 2), vec![0, 1]);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(recall_at_k(&[4, 7], &[7, 4]), Some(1.0));
        assert_eq!(recall_at_k(&[1, 2], &[7, 4]), Some(0.0));
        assert_eq!(recall_at_k(&[1, 2], &[1, 4, 5, 6]), Some(0.25));
        assert_eq!(recall_at_k(&[1], &[]), None);
        assert_eq!(ndcg_at_k(&[3, 0], &[3], 20), Some(1.0));
        let n = ndcg_at_k(&[0, 3], &[3], 20).unwrap();
        assert!((n - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[0, 1], &[3], 20), Some(0.0));
    }

    #[test]
    fn zero_model_has_zero_strengths() {
        let g = BipartiteGraph::from_pairs(2, 3, &[(0, 0), (1, 2)]);
        let s = DotScorer {
            users: Matrix::zeros(2, 4),
            items: Matrix::zeros(3, 4),
        };
        let st = strength_stats(&s, &g, None, 10, 5, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(st.negatives.count, 20);
        assert_eq!(st.train_pos.mean, 0.0);
        assert_eq!(st.negatives.mean, 0.0);
        assert_eq!(st.train_pos.hist.counts.iter().sum::<usize>(), 2);
    }

    #[test]
    fn evaluation_is_thread_count_independent() {
        let train = BipartiteGraph::from_pairs(3, 6, &[(0, 0), (1, 1), (2, 2)]);
        let test = BipartiteGraph::from_pairs(3, 6, &[(0, 3), (1, 4), (1, 5)]);
        let s = DotScorer {
            users: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]),
            items: Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.5, 0.5],
                vec![0.2, 0.1],
                vec![0.1, 0.9],
                vec![0.3, 0.3],
            ]),
        };
        let a = evaluate(&s, &train, &test, 2, 1).unwrap();
        let b = evaluate(&s, &train, &test, 2, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_user.len(), 2);
        assert_eq!(a.skipped_users, 1);
        let empty = BipartiteGraph::from_pairs(3, 6, &[]);
        assert!(evaluate(&s, &train, &empty, 2, 1).is_err());
    }
}
