use std::collections::BTreeSet;
use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqregen::corpus::{Dataset, ItemId, Sequence};
use seqregen::miner::*;

fn corpus(seqs: &[&[ItemId]]) -> Dataset {
    let sequences = seqs.iter().enumerate().map(|(u, s)| Sequence { user_id: u as u64, items: s.to_vec() }).collect();
    Dataset::new("t", sequences).unwrap()
}

/// Every ordered subsequence (length 2..=max_len) of every window, counted
/// once per sequence.
fn enumerate_patterns(ds: &Dataset, window: usize, max_len: usize, threshold: usize) -> BTreeSet<(Vec<ItemId>, usize)> {
    fn subsets(items: &[ItemId], max_len: usize, cur: &mut Vec<ItemId>, out: &mut BTreeSet<Vec<ItemId>>) {
        for i in 0..items.len() {
            cur.push(items[i]);
            if cur.len() >= 2 {
                out.insert(cur.clone());
            }
            if cur.len() < max_len {
                subsets(&items[i + 1..], max_len, cur, out);
            }
            cur.pop();
        }
    }
    let mut counts: std::collections::BTreeMap<Vec<ItemId>, usize> = Default::default();
    for s in &ds.sequences {
        let mut seen = BTreeSet::new();
        for start in 0..s.items.len() {
            let end = (start + window).min(s.items.len());
            subsets(&s.items[start..end], max_len, &mut Vec::new(), &mut seen);
        }
        for p in seen {
            *counts.entry(p).or_default() += 1;
        }
    }
    counts.into_iter().filter(|(_, c)| *c >= threshold).collect()
}

#[test]
fn worked_example_matches_enumeration() {
    let ds = corpus(&[&[1, 2, 3, 4, 5], &[1, 2, 3]]);
    let cfg = MinerConfig::new(3, 2);
    let mined: BTreeSet<(Vec<ItemId>, usize)> =
        mine_patterns(&ds, &cfg).unwrap().into_iter().map(|p| (p.items, p.support)).collect();
    assert_eq!(mined, enumerate_patterns(&ds, 3, 3, 2));
    let items: BTreeSet<Vec<ItemId>> = mined.iter().map(|(i, _)| i.clone()).collect();
    let expect: BTreeSet<Vec<ItemId>> = [vec![1, 2], vec![1, 3], vec![2, 3], vec![1, 2, 3]].into_iter().collect();
    assert_eq!(items, expect);
    for (p, s) in &mined {
        assert_eq!(*s, brute_force_support(&ds, p, 3).unwrap());
    }
}

#[test]
fn random_corpora_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let n = rng.gen_range(1..=10);
        let seqs: Vec<Vec<ItemId>> =
            (0..n).map(|_| (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(1..=6)).collect()).collect();
        let refs: Vec<&[ItemId]> = seqs.iter().map(Vec::as_slice).collect();
        let ds = corpus(&refs);
        let window = rng.gen_range(2..=4);
        let threshold = rng.gen_range(1..=3);
        let cfg = MinerConfig::new(window, threshold);
        let mined: BTreeSet<(Vec<ItemId>, usize)> =
            mine_patterns(&ds, &cfg).unwrap().into_iter().map(|p| (p.items, p.support)).collect();
        assert_eq!(mined, enumerate_patterns(&ds, window, window, threshold));
    }
}

#[test]
fn pairs_reference_containing_sequences() {
    let ds = corpus(&[&[1, 2, 3, 4, 5], &[1, 2, 3], &[5, 4, 1, 2]]);
    let cfg = MinerConfig::new(3, 2);
    let pats = mine_patterns(&ds, &cfg).unwrap();
    let pairs = build_pretrain_pairs(&ds, &pats, &cfg).unwrap();
    assert!(!pairs.is_empty());
    for p in &pairs {
        assert!(occurs_within_window(&ds.sequences[p.sequence_index].items, &p.pattern.items, 3));
    }
    let t = Instant::now();
    mine_patterns(&ds, &cfg).unwrap();
    assert!(t.elapsed().as_secs_f64() < 1.0);
}

proptest! {
    #[test]
    fn supports_meet_threshold_and_agree_with_brute_force(
        seqs in prop::collection::vec(prop::collection::vec(1u32..7, 1..9), 1..8),
        window in 2usize..5,
        threshold in 1usize..4,
    ) {
        let refs: Vec<&[ItemId]> = seqs.iter().map(Vec::as_slice).collect();
        let ds = corpus(&refs);
        let cfg = MinerConfig::new(window, threshold);
        for p in mine_patterns(&ds, &cfg).unwrap() {
            prop_assert!(p.support >= threshold);
            prop_assert!(p.items.len() >= 2 && p.items.len() <= window);
            prop_assert_eq!(p.support, brute_force_support(&ds, &p.items, window).unwrap());
        }
    }
}
