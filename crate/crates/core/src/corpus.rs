//! Interaction-sequence datasets: text IO, leave-one-out splitting and the
//! planted-pattern synthetic generator used by the test suites.
//!
//! Item ids are 1-based; `0` is reserved for padding and rejected on load.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub type ItemId = u32;

/// Default cap on sequence length (most recent items are kept).
pub const DEFAULT_MAX_LEN: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub user_id: u64,
    pub items: Vec<ItemId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// Vocabulary size; valid item ids are `1..=num_items`.
    pub num_items: usize,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    /// Builds a dataset whose vocabulary is the largest item id present.
    pub fn new(name: impl Into<String>, sequences: Vec<Sequence>) -> Result<Self> {
        let name = name.into();
        if sequences.is_empty() {
            return Err(Error::EmptyDataset(name));
        }
        let num_items = sequences.iter().flat_map(|s| s.items.iter()).copied().max().unwrap_or(0) as usize;
        Ok(Self { name, num_items, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }

    /// Keeps the most recent `max_len` items of every sequence.
    pub fn truncated(mut self, max_len: usize) -> Self {
        for s in &mut self.sequences {
            truncate_front(&mut s.items, max_len);
        }
        self
    }

    /// Renders the dataset in the one-user-per-line text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sequences {
            write!(out, "{}", s.user_id).unwrap();
            for it in &s.items {
                write!(out, " {it}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }
}

pub(crate) fn truncate_front<T>(items: &mut Vec<T>, max_len: usize) {
    if items.len() > max_len {
        items.drain(..items.len() - max_len);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoadOptions {
    pub max_len: usize,
    /// Remap item ids onto `1..=n` in ascending order of the original id.
    pub remap: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { max_len: DEFAULT_MAX_LEN, remap: false }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_dataset(&text, &path.display().to_string(), opts)
}

/// Parses `<user_id> <item_id>...` lines. Blank lines are skipped.
pub fn parse_dataset(text: &str, name: &str, opts: &LoadOptions) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| Error::Parse { source_name: name.to_string(), line, msg };
    let mut sequences = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let mut fields = line.split_whitespace();
        let Some(user) = fields.next() else { continue };
        let user_id: u64 = user.parse().map_err(|_| parse_err(lineno, format!("bad user id `{user}`")))?;
        let mut items = Vec::new();
        for f in fields {
            let it: ItemId = f.parse().map_err(|_| parse_err(lineno, format!("bad item id `{f}`")))?;
            if it == 0 {
                return Err(parse_err(lineno, "item id 0 is reserved for padding".into()));
            }
            items.push(it);
        }
        if items.is_empty() {
            return Err(parse_err(lineno, format!("user {user_id} has no items")));
        }
        truncate_front(&mut items, opts.max_len);
        sequences.push(Sequence { user_id, items });
    }
    if opts.remap {
        let mut ids: Vec<ItemId> = sequences.iter().flat_map(|s| s.items.iter().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        let map: BTreeMap<ItemId, ItemId> = ids.iter().enumerate().map(|(i, &old)| (old, i as ItemId + 1)).collect();
        for s in &mut sequences {
            for it in &mut s.items {
                *it = map[it];
            }
        }
    }
    Dataset::new(name, sequences)
}

/// One held-out interaction: rank `target` given `prefix`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub user_id: u64,
    pub prefix: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    /// Training prefixes; shares the parent's vocabulary.
    pub train: Dataset,
    pub val: Vec<HeldOut>,
    pub test: Vec<HeldOut>,
    /// Users dropped because they had fewer than three interactions.
    pub excluded: usize,
}

impl SplitDataset {
    pub fn num_items(&self) -> usize {
        self.train.num_items
    }
}

/// Last item → test, second-to-last → validation, remainder → train.
pub fn leave_one_out_split(ds: &Dataset) -> Result<SplitDataset> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut excluded = 0;
    for s in &ds.sequences {
        let n = s.items.len();
        if n < 3 {
            excluded += 1;
            continue;
        }
        let prefix = s.items[..n - 2].to_vec();
        val.push(HeldOut { user_id: s.user_id, prefix: prefix.clone(), target: s.items[n - 2] });
        test.push(HeldOut { user_id: s.user_id, prefix: s.items[..n - 1].to_vec(), target: s.items[n - 1] });
        train.push(Sequence { user_id: s.user_id, items: prefix });
    }
    if excluded > 0 {
        warn!("leave-one-out: excluded {excluded} sequence(s) shorter than 3");
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset(format!("{} (train split)", ds.name)));
    }
    let train = Dataset { name: format!("{}-train", ds.name), num_items: ds.num_items, sequences: train };
    Ok(SplitDataset { train, val, test, excluded })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub planted_patterns: Vec<Vec<ItemId>>,
    pub noise_rate: f64,
    /// Inclusive range for how many planted patterns make up one user.
    pub patterns_per_user: (usize, usize),
    pub seed: u64,
}

/// A generated corpus together with, per position, whether the item is an
/// injected noise item.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    pub dataset: Dataset,
    pub noise: Vec<Vec<bool>>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_synthetic_labeled(spec).map(|c| c.dataset)
}

/// Each user is a concatenation of uniformly chosen planted patterns. Before
/// every planted item a geometric number of noise items is inserted, so each
/// emitted position is noise with probability `noise_rate`. With
/// `noise_rate = 1` every planted item is replaced by a noise item.
pub fn generate_synthetic_labeled(spec: &SyntheticSpec) -> Result<LabeledCorpus> {
    if spec.planted_patterns.is_empty() {
        return Err(Error::InvalidArgument("planted pattern list is empty".into()));
    }
    if !(0.0..=1.0).contains(&spec.noise_rate) {
        return Err(Error::InvalidArgument(format!("noise_rate {} outside [0, 1]", spec.noise_rate)));
    }
    if spec.num_users == 0 || spec.num_items == 0 {
        return Err(Error::InvalidArgument("num_users and num_items must be positive".into()));
    }
    let (lo, hi) = spec.patterns_per_user;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!("patterns_per_user range ({lo}, {hi}) is invalid")));
    }
    for p in &spec.planted_patterns {
        if p.is_empty() || p.iter().any(|&it| it == 0 || it as usize > spec.num_items) {
            return Err(Error::InvalidArgument(format!("planted pattern {p:?} outside vocabulary 1..={}", spec.num_items)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sequences = Vec::with_capacity(spec.num_users);
    let mut noise = Vec::with_capacity(spec.num_users);
    for user in 0..spec.num_users {
        let count = rng.gen_range(lo..=hi);
        let mut items = Vec::new();
        let mut flags = Vec::new();
        for _ in 0..count {
            let pat = &spec.planted_patterns[rng.gen_range(0..spec.planted_patterns.len())];
            for &it in pat {
                if spec.noise_rate >= 1.0 {
                    items.push(rng.gen_range(1..=spec.num_items) as ItemId);
                    flags.push(true);
                    continue;
                }
                while rng.gen::<f64>() < spec.noise_rate {
                    items.push(rng.gen_range(1..=spec.num_items) as ItemId);
                    flags.push(true);
                }
                items.push(it);
                flags.push(false);
            }
        }
        sequences.push(Sequence { user_id: user as u64, items });
        noise.push(flags);
    }
    let dataset = Dataset::new(format!("synthetic-{}", spec.seed), sequences)?;
    Ok(LabeledCorpus { dataset, noise })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> LoadOptions {
        LoadOptions::default()
    }

    #[test]
    fn parses_simple_file() {
        let ds = parse_dataset("0 1 2 3\n1 2 3\n", "t", &opts()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_items, 3);
        assert_eq!(ds.sequences[1].items, vec![2, 3]);
    }

    #[test]
    fn rejects_padding_id_with_line_number() {
        let err = parse_dataset("0 1 2\n1 3 0 4\n", "t", &opts()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_garbage_and_empty() {
        assert!(matches!(parse_dataset("0 1 x\n", "t", &opts()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_dataset("7\n", "t", &opts()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_dataset("", "t", &opts()), Err(Error::EmptyDataset(_))));
        assert!(matches!(parse_dataset("\n\n", "t", &opts()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn truncation_keeps_most_recent_items() {
        let line: Vec<String> = (1..=60).map(|i| i.to_string()).collect();
        let ds = parse_dataset(&format!("0 {}\n", line.join(" ")), "t", &opts()).unwrap();
        assert_eq!(ds.sequences[0].items, (11..=60).collect::<Vec<_>>());
    }

    #[test]
    fn remap_is_dense_and_order_preserving() {
        let o = LoadOptions { remap: true, ..opts() };
        let ds = parse_dataset("0 10 30\n1 20 10\n", "t", &o).unwrap();
        assert_eq!(ds.num_items, 3);
        assert_eq!(ds.sequences[0].items, vec![1, 3]);
        assert_eq!(ds.sequences[1].items, vec![2, 1]);
    }

    #[test]
    fn split_examples() {
        let ds = Dataset::new(
            "t",
            vec![
                Sequence { user_id: 0, items: vec![1, 2, 3, 4, 5] },
                Sequence { user_id: 1, items: vec![1, 2, 3] },
                Sequence { user_id: 2, items: vec![1, 2] },
            ],
        )
        .unwrap();
        let sp = leave_one_out_split(&ds).unwrap();
        assert_eq!(sp.excluded, 1);
        assert_eq!(sp.train.sequences[0].items, vec![1, 2, 3]);
        assert_eq!(sp.val[0].target, 4);
        assert_eq!(sp.test[0].target, 5);
        assert_eq!(sp.test[0].prefix, vec![1, 2, 3, 4]);
        assert_eq!(sp.train.sequences[1].items, vec![1]);
        assert_eq!((sp.val[1].target, sp.test[1].target), (2, 3));
    }

    fn spec(noise_rate: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_users: 1000,
            num_items: 30,
            planted_patterns: vec![vec![1, 2, 3]],
            noise_rate,
            patterns_per_user: (2, 4),
            seed,
        }
    }

    #[test]
    fn noiseless_synthetic_repeats_pattern() {
        let ds = generate_synthetic(&spec(0.0, 1)).unwrap();
        for s in &ds.sequences {
            assert_eq!(s.items.len() % 3, 0);
            for chunk in s.items.chunks(3) {
                assert_eq!(chunk, &[1, 2, 3]);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&spec(0.3, 7)).unwrap();
        let b = generate_synthetic(&spec(0.3, 7)).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let c = generate_synthetic(&spec(0.3, 8)).unwrap();
        assert_ne!(a.to_text(), c.to_text());
    }

    #[test]
    fn empirical_noise_fraction_matches_rate() {
        let c = generate_synthetic_labeled(&spec(0.3, 3)).unwrap();
        let total: usize = c.noise.iter().map(|f| f.len()).sum();
        let noisy: usize = c.noise.iter().flatten().filter(|&&b| b).count();
        let frac = noisy as f64 / total as f64;
        assert!((frac - 0.3).abs() <= 0.03, "noise fraction {frac}");
    }

    #[test]
    fn synthetic_argument_errors() {
        let mut s = spec(0.1, 0);
        s.planted_patterns.clear();
        assert!(matches!(generate_synthetic(&s), Err(Error::InvalidArgument(_))));
        let mut s = spec(1.5, 0);
        assert!(generate_synthetic(&s).is_err());
        s.noise_rate = 0.1;
        s.planted_patterns = vec![vec![31]];
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn full_noise_terminates() {
        let c = generate_synthetic_labeled(&spec(1.0, 2)).unwrap();
        assert!(c.noise.iter().flatten().all(|&b| b));
    }
}
