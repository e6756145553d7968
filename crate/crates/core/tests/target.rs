use autodiff::fd::{central_gradient, relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqregen::corpus::{HeldOut, ItemId};
use seqregen::evalkit::mean_ndcg;
use seqregen::personalizer::{Personalizer, PersonalizerWeigher};
use seqregen::target::*;

fn cfg(kind: TargetKind) -> TargetModelConfig {
    TargetModelConfig { kind, embed_dim: 8, layers: 2, heads: 2, dropout: 0.3, max_len: 8, batch_size: 4, max_epochs: 6, patience: 3, ..Default::default() }
}

#[test]
fn next_item_gradient_matches_finite_differences() {
    for kind in [TargetKind::Attention, TargetKind::Recurrent] {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = TargetModel::new(cfg(kind), 12, 50 + seed).unwrap();
            let pattern: Vec<ItemId> = (0..rng.gen_range(2..=8)).map(|_| rng.gen_range(1..=12)).collect();
            let negs = sample_negatives(&pattern, 12, &mut rng).unwrap();
            let unweighted = vec![1.0; pattern.len() - 1];
            let weighted: Vec<f64> = (1..pattern.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            for w in [&unweighted, &weighted] {
                let (_, grad) = model.next_item_loss_and_grad(&pattern, &negs, w).unwrap();
                let fd = central_gradient(
                    |x| {
                        let mut m = model.clone();
                        m.params.set_flat(x);
                        m.next_item_loss(&pattern, &negs, w).unwrap()
                    },
                    &model.params.flat(),
                    1e-5,
                );
                let err = relative_error(&grad, &fd);
                assert!(err <= 1e-4, "{kind:?} seed {seed}: relative error {err}");
            }
        }
    }
}

#[test]
fn loss_input_errors() {
    let model = TargetModel::new(cfg(TargetKind::Attention), 12, 1).unwrap();
    assert!(model.next_item_loss(&[3], &[], &[]).is_err());
    assert!(model.next_item_loss(&[3, 4], &[5, 6], &[1.0]).is_err());
    assert!(model.next_item_loss(&[3, 13], &[5], &[1.0]).is_err());
    assert!(model.next_item_loss(&[1; 9], &[5; 8], &[1.0; 8]).is_err());
}

fn toy() -> (Vec<Vec<ItemId>>, Vec<HeldOut>) {
    let train: Vec<Vec<ItemId>> = (0..24).map(|u| (0..6).map(|t| 1 + ((u + t) % 10) as ItemId).collect()).collect();
    let val = train.iter().enumerate().map(|(u, s)| HeldOut { user_id: u as u64, prefix: s.clone(), target: 1 + (s[5] % 10) }).collect();
    (train, val)
}

#[test]
fn saturated_personalizer_reproduces_unweighted_training() {
    let (train, val) = toy();
    let c = cfg(TargetKind::Attention);
    let (plain, h1) = train_target(&train, &val, 10, &c, &mut UnitWeights, 7).unwrap();
    let mut pers = Personalizer::new(8, 1.0, 1).unwrap();
    pers.zero_params();
    pers.set_output_bias([1e3, -1e3]);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut weigher = PersonalizerWeigher { personalizer: &pers, rng: &mut rng, stochastic: true };
    let (weighted, h2) = train_target(&train, &val, 10, &c, &mut weigher, 7).unwrap();
    assert_eq!(plain.params, weighted.params);
    assert_eq!(h1.epoch_loss, h2.epoch_loss);
}

#[test]
fn early_stopping_keeps_best_validation_model() {
    let (train, val) = toy();
    let c = TargetModelConfig { max_epochs: 12, patience: 2, ..cfg(TargetKind::Recurrent) };
    let (model, h) = train_target(&train, &val, 10, &c, &mut UnitWeights, 3).unwrap();
    assert!(h.epochs_run <= 12);
    assert_eq!(h.val_ndcg.len(), h.epochs_run);
    let best = h.val_ndcg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(h.best_val_ndcg, best);
    assert!((mean_ndcg(&model, &val, c.eval_k).unwrap() - best).abs() < 1e-12);
}
