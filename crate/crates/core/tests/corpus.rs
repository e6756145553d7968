use proptest::prelude::*;
use seqregen::corpus::*;

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(prop::collection::vec(1u32..40, 1..15), 1..20).prop_map(|seqs| {
        let sequences = seqs.into_iter().enumerate().map(|(u, items)| Sequence { user_id: u as u64, items }).collect();
        Dataset::new("prop", sequences).unwrap()
    })
}

proptest! {
    #[test]
    fn split_reassembles_each_user(ds in dataset_strategy()) {
        let long = ds.sequences.iter().filter(|s| s.items.len() >= 3).count();
        match leave_one_out_split(&ds) {
            Err(_) => prop_assert_eq!(long, 0),
            Ok(split) => {
                prop_assert_eq!(split.train.len(), long);
                prop_assert_eq!(split.excluded, ds.len() - long);
                let originals: Vec<&Sequence> = ds.sequences.iter().filter(|s| s.items.len() >= 3).collect();
                for (((s, v), t), orig) in split.train.sequences.iter().zip(&split.val).zip(&split.test).zip(originals) {
                    let mut rebuilt = s.items.clone();
                    rebuilt.push(v.target);
                    prop_assert_eq!(&rebuilt, &t.prefix);
                    rebuilt.push(t.target);
                    prop_assert_eq!(&rebuilt, &orig.items);
                    prop_assert_eq!(&v.prefix, &s.items);
                }
            }
        }
    }

    #[test]
    fn text_format_round_trips(ds in dataset_strategy()) {
        let back = parse_dataset(&ds.to_text(), "prop", &LoadOptions::default()).unwrap();
        prop_assert_eq!(back.sequences, ds.sequences);
    }
}

#[test]
fn load_from_disk_truncates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    std::fs::write(&path, "7 1 2 3 4 5\n8 9 10\n").unwrap();
    let ds = load_dataset(&path, &LoadOptions { max_len: 3, remap: false }).unwrap();
    assert_eq!(ds.sequences[0].items, vec![3, 4, 5]);
    assert_eq!(ds.sequences[1].user_id, 8);
    assert!(load_dataset(dir.path().join("missing.txt"), &LoadOptions::default()).is_err());
}

#[test]
fn synthetic_labels_match_planted_items() {
    let spec = SyntheticSpec {
        num_users: 50,
        num_items: 20,
        planted_patterns: vec![vec![1, 2, 3], vec![4, 5]],
        noise_rate: 0.25,
        patterns_per_user: (2, 4),
        seed: 3,
    };
    let lab = generate_synthetic_labeled(&spec).unwrap();
    for (s, flags) in lab.dataset.sequences.iter().zip(&lab.noise) {
        assert_eq!(s.items.len(), flags.len());
        let clean: Vec<u32> = s.items.iter().zip(flags).filter(|(_, &f)| !f).map(|(&i, _)| i).collect();
        // Removing the noise leaves a concatenation of planted patterns.
        let mut rest = &clean[..];
        while !rest.is_empty() {
            let p = spec.planted_patterns.iter().find(|p| rest.starts_with(p)).expect("planted prefix");
            rest = &rest[p.len()..];
        }
    }
}
