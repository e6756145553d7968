use autodiff::fd::{central_gradient, relative_error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqregen::corpus::ItemId;
use seqregen::regenerator::*;

fn small(k: usize) -> RegeneratorConfig {
    RegeneratorConfig {
        embed_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        diversity_k: k,
        max_src_len: 12,
        max_pattern_len: 4,
        ..Default::default()
    }
}

fn random_seq(rng: &mut ChaCha8Rng, lens: std::ops::Range<usize>, n: u32) -> Vec<ItemId> {
    let len = rng.gen_range(lens);
    (0..len).map(|_| rng.gen_range(1..=n)).collect()
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let model = RegeneratorModel::new(small(3), 9, seed).unwrap();
        let srcs: Vec<Vec<ItemId>> = (0..3).map(|_| random_seq(&mut rng, 3..9, 9)).collect();
        let pats: Vec<Vec<ItemId>> = (0..3).map(|_| random_seq(&mut rng, 2..5, 9)).collect();
        let batch: Vec<(&[ItemId], &[ItemId])> = srcs.iter().zip(&pats).map(|(s, p)| (&s[..], &p[..])).collect();
        let (_, grad) = model.reconstruction_loss_and_grad(&batch).unwrap();
        let fd = central_gradient(
            |x| {
                let mut m = model.clone();
                m.params.set_flat(x);
                m.reconstruction_loss(&batch).unwrap()
            },
            &model.params.flat(),
            1e-5,
        );
        let err = relative_error(&grad, &fd);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn restrictive_decoding_stays_inside_source() {
    let model = RegeneratorModel::new(small(3), 20, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let seq = random_seq(&mut rng, 1..10, 20);
        for p in regenerate_sequence(&model, &seq, 0.0, &mut rng).unwrap() {
            assert!(p.items.iter().all(|it| seq.contains(it)), "{:?} ⊄ {seq:?}", p.items);
            assert!(p.items.len() >= 2 && p.items.len() <= 4);
        }
    }
    assert!(regenerate_sequence(&model, &[1, 2], 1.5, &mut rng).is_err());
}

#[test]
fn regeneration_is_deterministic_with_provenance() {
    let model = RegeneratorModel::new(small(2), 10, 1).unwrap();
    let sequences = (0..20)
        .map(|u| seqregen::corpus::Sequence { user_id: 100 + u, items: vec![1 + (u % 9) as u32, 2, 3, 4, 5, 6] })
        .collect();
    let ds = seqregen::corpus::Dataset::new("d", sequences).unwrap();
    let a = regenerate_dataset(&model, &ds, 0.5, 3, false).unwrap();
    let b = regenerate_dataset(&model, &ds, 0.5, 3, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.provenance.len(), a.dataset.len());
    assert!(a.provenance.iter().all(|p| p.source_user >= 100 && p.memory_index < 2));
    let dedup = regenerate_dataset(&model, &ds, 0.5, 3, true).unwrap();
    let unique: std::collections::BTreeSet<_> = dedup.dataset.sequences.iter().map(|s| &s.items).collect();
    assert_eq!(unique.len(), dedup.dataset.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn promoter_is_a_distribution(seed in 0u64..1000, pattern in prop::collection::vec(1u32..=12, 1..5)) {
        let model = RegeneratorModel::new(small(4), 12, seed).unwrap();
        let pi = model.promote(&pattern).unwrap();
        prop_assert_eq!(pi.len(), 4);
        prop_assert!(pi.iter().all(|&p| p > 0.0));
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_is_linear_in_pi(seed in 0u64..1000, a in 0.0f64..1.0, seq in prop::collection::vec(1u32..=12, 1..8)) {
        let model = RegeneratorModel::new(small(3), 12, seed).unwrap();
        let bank = model.encode(&seq).unwrap();
        let p1 = model.promote(&seq[..1]).unwrap();
        let p2 = [0.2, 0.5, 0.3];
        let blend: Vec<f64> = p1.iter().zip(p2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let lhs = mix_memories(&bank, &blend).unwrap();
        let m1 = mix_memories(&bank, &p1).unwrap();
        let m2 = mix_memories(&bank, &p2).unwrap();
        for ((l, x), y) in lhs.data.iter().zip(&m1.data).zip(&m2.data) {
            prop_assert!((l - (a * x + (1.0 - a) * y)).abs() < 1e-12);
        }
    }
}
