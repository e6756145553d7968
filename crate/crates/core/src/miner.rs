//! Span-constrained sequential pattern mining and pre-training pair
//! construction.
//!
//! A pattern occurs in a sequence when its items appear in order (not
//! necessarily contiguously) at positions whose first and last index differ
//! by less than the window size `α`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ItemId};
use crate::error::{io_err, Error, Result};

/// How occurrences are counted towards a pattern's support.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// Number of sequences with at least one occurrence.
    #[default]
    Sequences,
    /// Number of distinct occurrence position tuples.
    Occurrences,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinerConfig {
    /// Sliding window size `α`.
    pub window: usize,
    /// Minimum support `β`.
    pub threshold: usize,
    /// Longest pattern `M`; `None` means `α`.
    pub max_pattern_len: Option<usize>,
    pub support: SupportMode,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self { window: 10, threshold: 2, max_pattern_len: None, support: SupportMode::Sequences }
    }
}

impl MinerConfig {
    pub fn new(window: usize, threshold: usize) -> Self {
        Self { window, threshold, ..Self::default() }
    }

    pub fn max_len(&self) -> usize {
        self.max_pattern_len.unwrap_or(self.window)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.max_len();
        if self.window < 2 || self.threshold < 1 || m < 2 || m > self.window {
            return Err(Error::InvalidArgument(format!(
                "miner config needs α ≥ 2, β ≥ 1 and 2 ≤ M ≤ α (got α={}, β={}, M={m})",
                self.window, self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pattern {
    pub items: Vec<ItemId>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainPair {
    pub sequence_index: usize,
    pub pattern: Pattern,
}

/// Calls `f` once for every within-window occurrence (position tuple) of
/// every subsequence of length `2..=max_len`, with the tuple's items.
fn for_each_occurrence(items: &[ItemId], window: usize, max_len: usize, mut f: impl FnMut(&[ItemId])) {
    let n = items.len();
    let mut buf: Vec<ItemId> = Vec::with_capacity(max_len);
    fn extend(
        items: &[ItemId],
        next: usize,
        end: usize,
        max_len: usize,
        buf: &mut Vec<ItemId>,
        f: &mut dyn FnMut(&[ItemId]),
    ) {
        for j in next..end {
            buf.push(items[j]);
            f(buf);
            if buf.len() < max_len {
                extend(items, j + 1, end, max_len, buf, f);
            }
            buf.pop();
        }
    }
    for start in 0..n {
        let end = (start + window).min(n);
        buf.clear();
        buf.push(items[start]);
        extend(items, start + 1, end, max_len, &mut buf, &mut f);
    }
}

/// Distinct within-window subsequences of one sequence.
fn sequence_patterns(items: &[ItemId], window: usize, max_len: usize) -> BTreeSet<Vec<ItemId>> {
    let mut set = BTreeSet::new();
    for_each_occurrence(items, window, max_len, |p| {
        if !set.contains(p) {
            set.insert(p.to_vec());
        }
    });
    set
}

fn sort_patterns(patterns: &mut [Pattern]) {
    patterns.sort_by(|a, b| a.items.len().cmp(&b.items.len()).then_with(|| a.items.cmp(&b.items)));
}

/// All patterns of length `2..=M` with support `≥ β`, sorted by
/// `(length, items)`.
pub fn mine_patterns(ds: &Dataset, cfg: &MinerConfig) -> Result<Vec<Pattern>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset(ds.name.clone()));
    }
    let max_len = cfg.max_len();
    let mut counts: BTreeMap<Vec<ItemId>, usize> = BTreeMap::new();
    for s in &ds.sequences {
        match cfg.support {
            SupportMode::Sequences => {
                for p in sequence_patterns(&s.items, cfg.window, max_len) {
                    *counts.entry(p).or_default() += 1;
                }
            }
            SupportMode::Occurrences => for_each_occurrence(&s.items, cfg.window, max_len, |p| {
                if let Some(c) = counts.get_mut(p) {
                    *c += 1;
                } else {
                    counts.insert(p.to_vec(), 1);
                }
            }),
        }
    }
    let mut out: Vec<Pattern> = counts
        .into_iter()
        .filter(|&(_, support)| support >= cfg.threshold)
        .map(|(items, support)| Pattern { items, support })
        .collect();
    sort_patterns(&mut out);
    Ok(out)
}

/// One pair per (sequence, pattern) where the pattern occurs inside a window
/// of the sequence. Ordered by sequence index, then pattern order.
pub fn build_pretrain_pairs(ds: &Dataset, patterns: &[Pattern], cfg: &MinerConfig) -> Result<Vec<PretrainPair>> {
    cfg.validate()?;
    if patterns.is_empty() {
        return Ok(Vec::new());
    }
    let longest = patterns.iter().map(|p| p.items.len()).max().unwrap_or(2).min(cfg.window);
    let mut pairs = Vec::new();
    for (si, s) in ds.sequences.iter().enumerate() {
        let present = sequence_patterns(&s.items, cfg.window, longest);
        for p in patterns {
            if present.contains(&p.items) {
                pairs.push(PretrainPair { sequence_index: si, pattern: p.clone() });
            }
        }
    }
    Ok(pairs)
}

/// Whether `pattern` occurs in `items` with first and last positions less
/// than `window` apart. Exhaustive; used for validation.
pub fn occurs_within_window(items: &[ItemId], pattern: &[ItemId], window: usize) -> bool {
    fn search(items: &[ItemId], pattern: &[ItemId], from: usize, first: usize, window: usize) -> bool {
        let Some((&head, rest)) = pattern.split_first() else { return true };
        (from..items.len()).take_while(|&j| j < first + window).any(|j| items[j] == head && search(items, rest, j + 1, first, window))
    }
    let Some((&head, rest)) = pattern.split_first() else { return true };
    (0..items.len()).any(|i| items[i] == head && search(items, rest, i + 1, i, window))
}

/// Reference support count by exhaustive enumeration of position tuples.
/// Counts sequences (`SupportMode::Sequences` semantics).
pub fn brute_force_support(ds: &Dataset, pattern: &[ItemId], window: usize) -> Result<usize> {
    if pattern.len() < 2 {
        return Err(Error::InvalidArgument(format!("pattern {pattern:?} shorter than 2")));
    }
    Ok(ds.sequences.iter().filter(|s| occurs_within_window(&s.items, pattern, window)).count())
}

pub fn patterns_to_text(patterns: &[Pattern]) -> String {
    let mut out = String::new();
    for p in patterns {
        write!(out, "{}", p.support).unwrap();
        for it in &p.items {
            write!(out, " {it}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_patterns(patterns: &[Pattern], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, patterns_to_text(patterns)).map_err(io_err(path))
}

pub fn read_patterns(path: impl AsRef<Path>) -> Result<Vec<Pattern>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let nums: Result<Vec<u64>, _> = line.split_whitespace().map(str::parse::<u64>).collect();
        let nums = nums.map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if nums.is_empty() {
            continue;
        }
        if nums.len() < 3 {
            return Err(Error::Parse {
                source_name: path.display().to_string(),
                line: idx + 1,
                msg: "expected `<support> <item> <item>...`".into(),
            });
        }
        out.push(Pattern { support: nums[0] as usize, items: nums[1..].iter().map(|&x| x as ItemId).collect() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sequence;

    fn fig2() -> Dataset {
        Dataset::new(
            "fig2",
            vec![Sequence { user_id: 0, items: vec![1, 2, 3, 4, 5] }, Sequence { user_id: 1, items: vec![1, 2, 3] }],
        )
        .unwrap()
    }

    #[test]
    fn worked_example_patterns() {
        let pats = mine_patterns(&fig2(), &MinerConfig::new(3, 2)).unwrap();
        let items: Vec<Vec<ItemId>> = pats.iter().map(|p| p.items.clone()).collect();
        assert_eq!(items, vec![vec![1, 2], vec![1, 3], vec![2, 3], vec![1, 2, 3]]);
        assert!(pats.iter().all(|p| p.support == 2));
        assert!(!items.contains(&vec![3, 4]));
        assert_eq!(brute_force_support(&fig2(), &[3, 4], 3).unwrap(), 1);
        assert_eq!(brute_force_support(&fig2(), &[1, 2, 3], 3).unwrap(), 2);
    }

    #[test]
    fn threshold_above_corpus_size_is_empty() {
        let ds = fig2();
        let pats = mine_patterns(&ds, &MinerConfig::new(3, ds.len() + 1)).unwrap();
        assert!(pats.is_empty());
    }

    #[test]
    fn worked_example_pairs() {
        let ds = fig2();
        let cfg = MinerConfig::new(3, 2);
        let pats = mine_patterns(&ds, &cfg).unwrap();
        let pairs = build_pretrain_pairs(&ds, &pats, &cfg).unwrap();
        assert_eq!(pairs.len(), 8);
        assert_eq!(pairs.iter().filter(|p| p.sequence_index == 0).count(), 4);
        assert!(build_pretrain_pairs(&ds, &[], &cfg).unwrap().is_empty());
    }

    #[test]
    fn window_excludes_wide_spans() {
        let ds = Dataset::new("w", vec![Sequence { user_id: 0, items: vec![1, 3, 2] }]).unwrap();
        let cfg = MinerConfig::new(2, 1);
        let pat = Pattern { items: vec![1, 2], support: 1 };
        assert!(build_pretrain_pairs(&ds, &[pat], &cfg).unwrap().is_empty());
        assert!(!occurs_within_window(&[1, 3, 2], &[1, 2], 2));
        assert!(occurs_within_window(&[1, 3, 2], &[1, 2], 3));
    }

    #[test]
    fn brute_force_rejects_short_patterns() {
        assert!(brute_force_support(&fig2(), &[1], 3).is_err());
        assert_eq!(brute_force_support(&fig2(), &[9, 9], 3).unwrap(), 0);
    }

    #[test]
    fn occurrence_mode_counts_tuples() {
        let ds = Dataset::new("o", vec![Sequence { user_id: 0, items: vec![1, 2, 1, 2] }]).unwrap();
        let cfg = MinerConfig { support: SupportMode::Occurrences, ..MinerConfig::new(4, 1) };
        let pats = mine_patterns(&ds, &cfg).unwrap();
        let p12 = pats.iter().find(|p| p.items == vec![1, 2]).unwrap();
        // (0,1), (0,3), (2,3)
        assert_eq!(p12.support, 3);
        let seq = mine_patterns(&ds, &MinerConfig::new(4, 1)).unwrap();
        assert_eq!(seq.iter().find(|p| p.items == vec![1, 2]).unwrap().support, 1);
    }

    #[test]
    fn config_validation() {
        assert!(MinerConfig::new(1, 2).validate().is_err());
        assert!(MinerConfig::new(3, 0).validate().is_err());
        assert!(MinerConfig { max_pattern_len: Some(4), ..MinerConfig::new(3, 1) }.validate().is_err());
        assert!(MinerConfig { max_pattern_len: Some(1), ..MinerConfig::new(3, 1) }.validate().is_err());
    }

    #[test]
    fn pattern_file_round_trip() {
        let pats = mine_patterns(&fig2(), &MinerConfig::new(3, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        write_patterns(&pats, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "2 1 2\n2 1 3\n2 2 3\n2 1 2 3\n");
        assert_eq!(read_patterns(&path).unwrap(), pats);
    }
}
