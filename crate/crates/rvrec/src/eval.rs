//! Ranking metrics over sampled candidate lists (HR@K, NDCG@K) and the
//! counterfactual explanation metrics (PN, PS, and their harmonic mean).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_eval_negatives, InteractionDataset, SplitSet};
use crate::engine::mix_seed;
use crate::model::{tags, ModelView};
use crate::msvr::Explanation;

/// One user's scored candidate list: exactly one positive among the
/// candidates.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub user: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    pub positive: usize,
}

impl RankedList {
    /// 1-based rank of the positive under descending score, ties broken by
    /// ascending item index.
    pub fn rank_of_positive(&self) -> usize {
        let pos_idx = self
            .items
            .iter()
            .position(|&i| i == self.positive)
            .expect("positive must be among the candidates");
        let ps = self.scores[pos_idx];
        let mut rank = 1;
        for (k, (&item, &s)) in self.items.iter().zip(self.scores.iter()).enumerate() {
            if k == pos_idx {
                continue;
            }
            if s > ps || (s == ps && item < self.positive) {
                rank += 1;
            }
        }
        rank
    }
}

pub fn hr_at_k(list: &RankedList, k: usize) -> f64 {
    if list.rank_of_positive() <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item NDCG: 1/log2(rank + 1) inside the cutoff, else 0.
pub fn ndcg_at_k(list: &RankedList, k: usize) -> f64 {
    let rank = list.rank_of_positive();
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct ExplainMetrics {
    pub pn: Option<f64>,
    pub ps: Option<f64>,
    pub f_ns: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct MetricsReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub explain: BTreeMap<usize, ExplainMetrics>,
}

impl MetricsReport {
    /// `key<TAB>value` lines: hr@K, ndcg@K, then pn/ps/fns per explanation K.
    pub fn to_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in &self.hr {
            out.push(format!("hr@{k}\t{v}"));
        }
        for (k, v) in &self.ndcg {
            out.push(format!("ndcg@{k}\t{v}"));
        }
        for (k, m) in &self.explain {
            if let Some(pn) = m.pn {
                out.push(format!("pn@{k}\t{pn}"));
            }
            if let Some(ps) = m.ps {
                out.push(format!("ps@{k}\t{ps}"));
            }
            if let Some(f) = m.f_ns {
                out.push(format!("fns@{k}\t{f}"));
            }
        }
        out
    }

    pub fn summary_line(&self) -> String {
        self.to_lines()
            .iter()
            .map(|l| l.replace('\t', "="))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Deterministic per-user candidate pool: the held-out test positive plus
/// up-to-`n_neg` negatives sampled uniformly from items the user never
/// interacted with (train, validation, or test).
pub fn eval_candidates(
    full: &InteractionDataset,
    split: &SplitSet,
    user: usize,
    n_neg: usize,
    seed: u64,
) -> Vec<usize> {
    let mut candidates = vec![split.test[user]];
    candidates.extend(sample_eval_negatives(
        full,
        user,
        n_neg,
        mix_seed(seed, &[tags::EVAL_NEG, user as u64]),
    ));
    candidates
}

fn ranked_list_for(
    view: &ModelView,
    full: &InteractionDataset,
    split: &SplitSet,
    user: usize,
    n_neg: usize,
    seed: u64,
) -> RankedList {
    let candidates = eval_candidates(full, split, user, n_neg, seed);
    let (repr, _) = view.user_representation(user, split.train.user_list(user));
    let scores = candidates.iter().map(|&i| view.score_vec(&repr, i)).collect();
    RankedList {
        user,
        items: candidates,
        scores,
        positive: split.test[user],
    }
}

/// HR@K / NDCG@K averaged over every user's test item.
pub fn evaluate_ranking(
    view: &ModelView,
    full: &InteractionDataset,
    split: &SplitSet,
    ks: &[usize],
    n_neg: usize,
    seed: u64,
) -> MetricsReport {
    let users: Vec<usize> = (0..full.num_users()).collect();
    let per_user: Vec<Vec<(f64, f64)>> = users
        .par_iter()
        .map(|&u| {
            let list = ranked_list_for(view, full, split, u, n_neg, seed);
            ks.iter()
                .map(|&k| (hr_at_k(&list, k), ndcg_at_k(&list, k)))
                .collect()
        })
        .collect();
    let n = users.len() as f64;
    let mut report = MetricsReport::default();
    for (ki, &k) in ks.iter().enumerate() {
        let hr: f64 = per_user.iter().map(|v| v[ki].0).sum::<f64>() / n;
        let ndcg: f64 = per_user.iter().map(|v| v[ki].1).sum::<f64>() / n;
        report.hr.insert(k, hr);
        report.ndcg.insert(k, ndcg);
    }
    report
}

/// Explanation records for one user's top-K recommendations: each
/// recommended item paired with the user's best coalition.
pub fn explanations_for_user(
    view: &ModelView,
    full: &InteractionDataset,
    split: &SplitSet,
    user: usize,
    k: usize,
    n_neg: usize,
    seed: u64,
) -> Vec<Explanation> {
    let list = ranked_list_for(view, full, split, user, n_neg, seed);
    let chosen = view.best_coalition_for(user, split.train.user_list(user));
    let Some(chosen) = chosen else {
        return Vec::new();
    };
    let mut order: Vec<usize> = (0..list.items.len()).collect();
    order.sort_by(|&a, &b| {
        list.scores[b]
            .partial_cmp(&list.scores[a])
            .unwrap()
            .then(list.items[a].cmp(&list.items[b]))
    });
    order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, idx)| Explanation {
            user,
            item: list.items[idx],
            rank: rank + 1,
            coalition_items: chosen.items.clone(),
            phi: chosen.phi,
            degenerate: chosen.degenerate,
        })
        .collect()
}

fn top_k_items(view: &ModelView, repr: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&i| (i, view.score_vec(repr, i)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Probability of necessity: remove the explanation's items from the user's
/// train list, recompute the representation without retraining, re-rank the
/// same candidate pool, and count how often the recommended item drops out of
/// the top K. Undefined (None) when no record has a nonempty removal set.
pub fn pn(
    view: &ModelView,
    full: &InteractionDataset,
    split: &SplitSet,
    explanations: &[Explanation],
    k: usize,
    n_neg: usize,
    seed: u64,
) -> Option<f64> {
    intervention_rate(view, full, split, explanations, k, n_neg, seed, true)
}

/// Probability of sufficiency: keep ONLY the explanation's items and count
/// how often the recommended item is still in the top K.
pub fn ps(
    view: &ModelView,
    full: &InteractionDataset,
    split: &SplitSet,
    explanations: &[Explanation],
    k: usize,
    n_neg: usize,
    seed: u64,
) -> Option<f64> {
    intervention_rate(view, full, split, explanations, k, n_neg, seed, false)
}

#[allow(clippy::too_many_arguments)]
fn intervention_rate(
    view: &ModelView,
    full: &InteractionDataset,
    split: &SplitSet,
    explanations: &[Explanation],
    k: usize,
    n_neg: usize,
    seed: u64,
    necessity: bool,
) -> Option<f64> {
    let mut denom = 0usize;
    let mut num = 0usize;
    for ex in explanations {
        if ex.coalition_items.is_empty() {
            continue;
        }
        denom += 1;
        let train_list = split.train.user_list(ex.user);
        let modified: Vec<usize> = if necessity {
            train_list
                .iter()
                .copied()
                .filter(|i| !ex.coalition_items.contains(i))
                .collect()
        } else {
            train_list
                .iter()
                .copied()
                .filter(|i| ex.coalition_items.contains(i))
                .collect()
        };
        let (repr, _) = view.user_representation(ex.user, &modified);
        let candidates = eval_candidates(full, split, ex.user, n_neg, seed);
        let top = top_k_items(view, &repr, &candidates, k);
        let present = top.contains(&ex.item);
        let hit = if necessity { !present } else { present };
        if hit {
            num += 1;
        }
    }
    if denom == 0 {
        None
    } else {
        Some(num as f64 / denom as f64)
    }
}

/// Harmonic mean of PN and PS; 0 when both vanish.
pub fn f_ns(pn: f64, ps: f64) -> f64 {
    if pn + ps == 0.0 {
        0.0
    } else {
        2.0 * pn * ps / (pn + ps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(scores: &[f64], positive: usize) -> RankedList {
        RankedList {
            user: 0,
            items: (0..scores.len()).collect(),
            scores: scores.to_vec(),
            positive,
        }
    }

    #[test]
    fn hr_rank_cutoffs() {
        // Positive (item 0) has the top score.
        let l = list(&[5.0, 1.0, 0.5, 0.2, 0.1, 0.0], 0);
        assert_eq!(hr_at_k(&l, 5), 1.0);

        // Positive ranked 6th.
        let l = list(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, -1.0, -2.0, -3.0, -4.0], 0);
        assert_eq!(l.rank_of_positive(), 6);
        assert_eq!(hr_at_k(&l, 5), 0.0);
        assert_eq!(hr_at_k(&l, 10), 1.0);
    }

    #[test]
    fn ndcg_closed_forms() {
        let l = list(&[5.0, 1.0], 0);
        assert_eq!(l.rank_of_positive(), 1);
        assert_eq!(ndcg_at_k(&l, 5), 1.0);

        // rank 3 -> 1/log2(4) = 0.5
        let l = list(&[1.0, 2.0, 3.0], 0);
        assert_eq!(l.rank_of_positive(), 3);
        assert!((ndcg_at_k(&l, 5) - 0.5).abs() < 1e-15);

        // rank 11 with K = 10 -> 0
        let scores: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let l = list(&scores, 0);
        assert_eq!(l.rank_of_positive(), 11);
        assert_eq!(ndcg_at_k(&l, 10), 0.0);
    }

    #[test]
    fn tie_break_is_ascending_item_index() {
        // items 0..3 all score 1.0; positive is item 2: items 0 and 1 beat it.
        let l = list(&[1.0, 1.0, 1.0, 1.0], 2);
        assert_eq!(l.rank_of_positive(), 3);
    }

    #[test]
    fn metric_monotonicity_in_k() {
        let l = list(&[1.0, 2.0, 3.0, 0.5], 0);
        let mut last_hr = 0.0;
        let mut last_ndcg = 0.0;
        for k in 1..=4 {
            let h = hr_at_k(&l, k);
            let n = ndcg_at_k(&l, k);
            assert!(h >= last_hr);
            assert!(n >= last_ndcg);
            assert!(n <= h, "single-relevant NDCG cannot exceed HR");
            last_hr = h;
            last_ndcg = n;
        }
    }

    #[test]
    fn f_ns_closed_forms() {
        assert_eq!(f_ns(1.0, 1.0), 1.0);
        assert_eq!(f_ns(1.0, 0.0), 0.0);
        assert_eq!(f_ns(0.0, 0.0), 0.0);
        assert!((f_ns(0.5, 0.5) - 0.5).abs() < 1e-15);
        // Between min and max.
        let v = f_ns(0.3, 0.9);
        assert!(v >= 0.3 && v <= 0.9);
    }
}
