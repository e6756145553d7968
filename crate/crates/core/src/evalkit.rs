//! Leave-one-out ranking metrics over the full item catalogue.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{HeldOut, ItemId, SplitDataset};
use crate::error::{io_err, Error, Result};

/// Anything that can score every item given a history prefix.
pub trait ItemScorer {
    fn num_items(&self) -> usize;
    /// Scores for items `1..=num_items` (index `i` holds item `i + 1`).
    fn score_all(&self, prefix: &[ItemId]) -> Vec<f64>;
}

/// `1 + #{strictly higher scores} + #{equal scores on smaller item ids}`.
pub fn rank_of_target(scores: &[f64], target: ItemId) -> Result<usize> {
    let t = target as usize;
    if t == 0 || t > scores.len() {
        return Err(Error::InvalidArgument(format!("target {target} outside 1..={}", scores.len())));
    }
    let st = scores[t - 1];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s > st || (s == st && i < t - 1) {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` inside the cut-off.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Drop items already in the prefix from the candidates (the target
    /// itself always stays).
    pub exclude_history: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![10, 20], exclude_history: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Keys look like `test/ndcg@10`.
    pub metrics: BTreeMap<String, f64>,
    pub num_users: usize,
    pub options: EvalOptions,
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    /// `key = value` lines, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "num_users = {}", self.num_users).unwrap();
        writeln!(out, "exclude_history = {}", self.options.exclude_history).unwrap();
        for (k, v) in &self.metrics {
            writeln!(out, "{k} = {v:.6}").unwrap();
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }
}

/// Rank of every held-out target.
pub fn heldout_ranks(scorer: &impl ItemScorer, heldout: &[HeldOut], exclude_history: bool) -> Result<Vec<usize>> {
    heldout
        .iter()
        .map(|h| {
            let mut scores = scorer.score_all(&h.prefix);
            if exclude_history {
                for &it in &h.prefix {
                    if it != h.target && (it as usize) <= scores.len() {
                        scores[it as usize - 1] = f64::NEG_INFINITY;
                    }
                }
            }
            rank_of_target(&scores, h.target)
        })
        .collect()
}

fn aggregate(prefix: &str, ranks: &[usize], ks: &[usize], into: &mut BTreeMap<String, f64>) {
    let n = ranks.len() as f64;
    for &k in ks {
        let recall: f64 = ranks.iter().map(|&r| recall_at_k(r, k)).sum::<f64>() / n;
        let ndcg: f64 = ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n;
        into.insert(format!("{prefix}/recall@{k}"), recall);
        into.insert(format!("{prefix}/ndcg@{k}"), ndcg);
    }
}

/// Mean NDCG@k over held-out users.
pub fn mean_ndcg(scorer: &impl ItemScorer, heldout: &[HeldOut], k: usize) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::EmptyDataset("held-out targets".into()));
    }
    let ranks = heldout_ranks(scorer, heldout, false)?;
    Ok(ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / ranks.len() as f64)
}

/// Validation and test metrics, averaged over users.
pub fn evaluate(scorer: &impl ItemScorer, split: &SplitDataset, opts: &EvalOptions) -> Result<MetricReport> {
    if split.test.is_empty() {
        return Err(Error::EmptyDataset(format!("{} (no evaluable users)", split.train.name)));
    }
    let mut metrics = BTreeMap::new();
    let val = heldout_ranks(scorer, &split.val, opts.exclude_history)?;
    let test = heldout_ranks(scorer, &split.test, opts.exclude_history)?;
    aggregate("val", &val, &opts.ks, &mut metrics);
    aggregate("test", &test, &opts.ks, &mut metrics);
    Ok(MetricReport { metrics, num_users: split.test.len(), options: opts.clone() })
}

/// Per-user test ranks as `user_id rank` lines.
pub fn rank_dump(scorer: &impl ItemScorer, split: &SplitDataset, opts: &EvalOptions) -> Result<String> {
    let ranks = heldout_ranks(scorer, &split.test, opts.exclude_history)?;
    let mut out = String::new();
    for (h, r) in split.test.iter().zip(ranks) {
        writeln!(out, "{} {r}", h.user_id).unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_tie_rule() {
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 2).unwrap(), 1);
        let flat = [0.5; 6];
        assert_eq!(rank_of_target(&flat, 1).unwrap(), 1);
        assert_eq!(rank_of_target(&flat, 5).unwrap(), 5);
        assert!(rank_of_target(&flat, 0).is_err());
        assert!(rank_of_target(&flat, 7).is_err());
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!(recall_at_k(1, 10), 1.0);
        assert_eq!(ndcg_at_k(1, 20), 1.0);
        assert_eq!(recall_at_k(11, 10), 0.0);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert!((ndcg_at_k(3, 10) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn history_exclusion_keeps_target() {
        struct Fixed;
        impl ItemScorer for Fixed {
            fn num_items(&self) -> usize {
                4
            }
            fn score_all(&self, _: &[ItemId]) -> Vec<f64> {
                vec![4.0, 3.0, 2.0, 1.0]
            }
        }
        let h = vec![HeldOut { user_id: 0, prefix: vec![1, 2, 3], target: 3 }];
        assert_eq!(heldout_ranks(&Fixed, &h, false).unwrap(), vec![3]);
        assert_eq!(heldout_ranks(&Fixed, &h, true).unwrap(), vec![1]);
    }
}
