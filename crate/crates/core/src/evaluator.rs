//! Full-rank top-K evaluation: every item is scored for every evaluated user,
//! the user's training positives (and validation positives when evaluating
//! on test) are masked, and Recall@K / MRR@K are averaged over users with at
//! least one held-out interaction.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckg::{NodeId, NodeSpace};
use crate::dataset::{SplitDataset, UserItems};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::score_all_items;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub user: NodeId,
    pub top_k: Vec<NodeId>,
    /// Held-out items of the user, sorted.
    pub relevant: Vec<NodeId>,
}

impl RankingResult {
    pub fn hits(&self) -> usize {
        self.top_k
            .iter()
            .filter(|i| self.relevant.binary_search(i).is_ok())
            .count()
    }

    /// 1-based rank of the first relevant item in `top_k`.
    pub fn first_hit_rank(&self) -> Option<usize> {
        self.top_k
            .iter()
            .position(|i| self.relevant.binary_search(i).is_ok())
            .map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub k: usize,
    pub recall_at_k: f64,
    pub mrr_at_k: f64,
    pub num_users_evaluated: usize,
    pub num_users_skipped: usize,
    /// Whether validation positives were masked while ranking.
    pub masked_validation: bool,
}

/// Descending score, ties by ascending node id.
fn ranking_order(a: &(f64, NodeId), b: &(f64, NodeId)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top-`k` items by score, skipping everything in `masked` (sorted).
/// `scores[j]` is the score of item offset `j`.
pub fn top_k_items(scores: &[f64], space: NodeSpace, masked: &[&[NodeId]], k: usize) -> Vec<NodeId> {
    let mut cands: Vec<(f64, NodeId)> = scores
        .iter()
        .enumerate()
        .map(|(j, &s)| (s, space.item(j)))
        .filter(|(_, id)| !masked.iter().any(|m| m.binary_search(id).is_ok()))
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, ranking_order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(ranking_order);
    cands.into_iter().map(|(_, id)| id).collect()
}

fn mean(results: &[RankingResult], per_user: impl Fn(&RankingResult) -> f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("ranking results"));
    }
    Ok(results.iter().map(per_user).sum::<f64>() / results.len() as f64)
}

/// Mean over users of `|top_k ∩ relevant| / |relevant|`.
pub fn recall_at_k(results: &[RankingResult]) -> Result<f64> {
    mean(results, |r| {
        if r.relevant.is_empty() {
            0.0
        } else {
            r.hits() as f64 / r.relevant.len() as f64
        }
    })
}

/// Mean over users of the reciprocal rank of the first relevant item within
/// `top_k` (0 when there is none).
pub fn mrr_at_k(results: &[RankingResult]) -> Result<f64> {
    mean(results, |r| r.first_hit_rank().map_or(0.0, |p| 1.0 / p as f64))
}

/// Ranks users against a fixed split.
#[derive(Debug, Clone)]
pub struct Evaluator {
    space: NodeSpace,
    train: UserItems,
    validation: UserItems,
    test: UserItems,
}

impl Evaluator {
    pub fn new(space: NodeSpace, split: &SplitDataset) -> Self {
        Self {
            space,
            train: UserItems::new(space, &split.train),
            validation: UserItems::new(space, &split.validation),
            test: UserItems::new(space, &split.test),
        }
    }

    fn relevant(&self, which: EvalSplit) -> &UserItems {
        match which {
            EvalSplit::Validation => &self.validation,
            EvalSplit::Test => &self.test,
        }
    }

    /// Ranking for one user, or `None` when every item is masked.
    pub fn rank(&self, e_star: &Matrix, user: NodeId, which: EvalSplit, k: usize) -> Result<Option<RankingResult>> {
        let scores = score_all_items(e_star, self.space, user)?;
        let mut masks: Vec<&[NodeId]> = vec![self.train.items(user)];
        if which == EvalSplit::Test {
            masks.push(self.validation.items(user));
        }
        let masked: usize = masks.iter().map(|m| m.len()).sum();
        if masked >= self.space.items {
            return Ok(None);
        }
        Ok(Some(RankingResult {
            user,
            top_k: top_k_items(&scores, self.space, &masks, k),
            relevant: self.relevant(which).items(user).to_vec(),
        }))
    }

    /// Rankings for every user with held-out items, plus the number of users
    /// skipped for having nothing rankable.
    pub fn rank_all(&self, e_star: &Matrix, which: EvalSplit, k: usize) -> Result<(Vec<RankingResult>, usize)> {
        if e_star.rows() != self.space.len() {
            return Err(Error::invalid(format!(
                "embedding rows {} != node count {}",
                e_star.rows(),
                self.space.len()
            )));
        }
        let relevant = self.relevant(which);
        let users: Vec<NodeId> = (0..self.space.users)
            .map(|u| self.space.user(u))
            .filter(|&u| !relevant.items(u).is_empty())
            .collect();
        let ranked: Vec<Option<RankingResult>> = users
            .par_iter()
            .map(|&u| self.rank(e_star, u, which, k))
            .collect::<Result<_>>()?;
        let skipped = ranked.iter().filter(|r| r.is_none()).count();
        Ok((ranked.into_iter().flatten().collect(), skipped))
    }

    pub fn evaluate(&self, e_star: &Matrix, which: EvalSplit, k: usize) -> Result<EvalReport> {
        let (results, skipped) = self.rank_all(e_star, which, k)?;
        Ok(EvalReport {
            split: which,
            k,
            recall_at_k: recall_at_k(&results)?,
            mrr_at_k: mrr_at_k(&results)?,
            num_users_evaluated: results.len(),
            num_users_skipped: skipped,
            masked_validation: which == EvalSplit::Test,
        })
    }
}

/// Per-user CSV: `user_id,relevant,hits,first_hit_rank` (rank empty when
/// no hit).
pub fn per_user_csv(results: &[RankingResult], user_name: impl Fn(NodeId) -> String) -> String {
    let mut out = String::from("user_id,relevant,hits,first_hit_rank\n");
    for r in results {
        let rank = r.first_hit_rank().map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", user_name(r.user), r.relevant.len(), r.hits(), rank);
    }
    out
}
