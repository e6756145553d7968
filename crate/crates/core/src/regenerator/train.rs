use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RegeneratorConfig, RegeneratorModel};
use crate::corpus::{Dataset, ItemId};
use crate::error::{Error, Result};
use crate::miner::PretrainPair;
use crate::optim::Adam;
use crate::seeds::mix64;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    /// Token-weighted mean training loss observed during each epoch.
    pub train_loss: Vec<f64>,
    /// Held-out loss after each epoch (empty when nothing is held out).
    pub holdout_loss: Vec<f64>,
    pub best_epoch: usize,
    /// Per-token loss of the returned parameters over all training pairs.
    pub final_train_loss: f64,
    pub num_train_pairs: usize,
    pub num_holdout_pairs: usize,
}

fn pair_key(p: &PretrainPair) -> u64 {
    let mut h = mix64(p.sequence_index as u64);
    for &it in &p.pattern.items {
        h = mix64(h ^ it as u64);
    }
    h
}

fn as_batch<'a>(ds: &'a Dataset, ps: &[&'a PretrainPair]) -> Vec<(&'a [ItemId], &'a [ItemId])> {
    ps.iter().map(|p| (&ds.sequences[p.sequence_index].items[..], &p.pattern.items[..])).collect()
}

fn mean_loss(model: &RegeneratorModel, batch: &[(&[ItemId], &[ItemId])], chunk: usize) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for c in batch.chunks(chunk) {
        let n: usize = c.iter().map(|(_, p)| p.len() + 1).sum();
        nll += model.reconstruction_loss(c)? * n as f64;
        tokens += n;
    }
    Ok(nll / tokens as f64)
}

/// Pre-trains a regenerator on `(sequence, pattern)` pairs with Adam,
/// early-stopping on a hash-selected held-out slice of the pairs.
pub fn pretrain(
    ds: &Dataset,
    pairs: &[PretrainPair],
    cfg: &RegeneratorConfig,
    seed: u64,
) -> Result<(RegeneratorModel, PretrainReport)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pre-training pairs".into()));
    }
    let mut model = RegeneratorModel::new(cfg.clone(), ds.num_items, seed)?;

    let cutoff = (cfg.holdout_fraction * u64::MAX as f64) as u64;
    let (mut holdout, mut train): (Vec<&PretrainPair>, Vec<&PretrainPair>) =
        pairs.iter().partition(|p| cfg.holdout_fraction > 0.0 && pair_key(p) < cutoff);
    if train.is_empty() {
        train = std::mem::take(&mut holdout);
    }
    let holdout_batch = as_batch(ds, &holdout);

    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x5052_4554));
    let mut opt = Adam::new(cfg.learning_rate, model.params.num_scalars());
    let mut report = PretrainReport { num_train_pairs: train.len(), num_holdout_pairs: holdout.len(), ..Default::default() };
    let mut best = (f64::INFINITY, model.params.clone());
    let mut bad_epochs = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut idx = chunk.to_vec();
            idx.sort_by_key(|&i| train[i].sequence_index);
            let picked: Vec<&PretrainPair> = idx.iter().map(|&i| train[i]).collect();
            let batch = as_batch(ds, &picked);
            let (loss, grad) = model.reconstruction_loss_and_grad(&batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            opt.step(&mut model.params, &grad);
            let n: usize = batch.iter().map(|(_, p)| p.len() + 1).sum();
            nll += loss * n as f64;
            tokens += n;
        }
        let train_loss = nll / tokens as f64;
        report.train_loss.push(train_loss);
        report.epochs_run = epoch + 1;

        let metric = if holdout_batch.is_empty() {
            train_loss
        } else {
            let h = mean_loss(&model, &holdout_batch, cfg.batch_size)?;
            report.holdout_loss.push(h);
            h
        };
        debug!("pretrain epoch {epoch}: train {train_loss:.5} metric {metric:.5}");
        if metric < best.0 {
            best = (metric, model.params.clone());
            report.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                info!("pretrain: early stop after epoch {epoch}");
                break;
            }
        }
    }
    model.params = best.1;
    report.final_train_loss = mean_loss(&model, &as_batch(ds, &train), cfg.batch_size)?;
    Ok((model, report))
}
