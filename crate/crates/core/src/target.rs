//! Next-item recommenders trained on (regenerated) pattern corpora.
//!
//! Two kinds are provided: a causal self-attention stack and a gated
//! recurrent network. Both expose per-position hidden states `h_t`, score
//! items by dot product with tied item embeddings, and train on the
//! one-negative-per-position binary cross-entropy, optionally weighted per
//! sample.

use autodiff::{Graph, Mat, ParamSet, Scalar, Var};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{truncate_front, HeldOut, ItemId};
use crate::error::{Error, Result};
use crate::evalkit::{mean_ndcg, ItemScorer};
use crate::nn::{dropout, glorot, normal, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::optim::Adam;
use crate::seeds::mix64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    Attention,
    Recurrent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetModelConfig {
    pub kind: TargetKind,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Cut-off of the validation NDCG used for early stopping.
    pub eval_k: usize,
}

impl Default for TargetModelConfig {
    fn default() -> Self {
        Self {
            kind: TargetKind::Attention,
            embed_dim: 64,
            layers: 2,
            heads: 1,
            dropout: 0.5,
            max_len: 50,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 1000,
            patience: 20,
            eval_k: 20,
        }
    }
}

impl TargetModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.embed_dim > 0
            && self.patience >= 1
            && self.layers >= 1
            && self.max_len >= 2
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.dropout)
            && (self.kind == TargetKind::Recurrent || (self.heads >= 1 && self.embed_dim % self.heads == 0));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid target model config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct PreNormBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct GruCell {
    /// Input projection to `[z | r | candidate]`.
    input: Linear,
    /// Hidden projection for the `z` and `r` gates.
    hidden_zr: usize,
    /// Hidden projection for the candidate.
    hidden_c: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Encoder {
    Attention { pos_emb: usize, blocks: Vec<PreNormBlock>, final_ln: LayerNorm },
    Recurrent { cells: Vec<GruCell> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetModel {
    pub config: TargetModelConfig,
    pub num_items: usize,
    item_emb: usize,
    encoder: Encoder,
    pub params: ParamSet,
}

/// Dropout randomness for a training-mode forward pass.
pub struct Train<'r, R: Rng> {
    pub rate: f64,
    pub rng: &'r mut R,
}

impl TargetModel {
    pub fn new(config: TargetModelConfig, num_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_items < 2 {
            return Err(Error::InvalidArgument("target models need at least two items".into()));
        }
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut emb = normal(&mut rng, num_items + 1, d, 1.0 / (d as f64).sqrt());
        emb.row_mut(0).fill(0.0);
        let item_emb = ps.add("item_emb", emb);
        let encoder = match config.kind {
            TargetKind::Attention => {
                let pos_emb = ps.add("pos_emb", normal(&mut rng, config.max_len, d, 0.1 / (d as f64).sqrt()));
                let blocks = (0..config.layers)
                    .map(|l| PreNormBlock {
                        ln1: LayerNorm::new(&mut ps, &format!("blk{l}.ln1"), d),
                        attn: MultiHeadAttention::new(&mut ps, &mut rng, &format!("blk{l}.attn"), d, config.heads),
                        ln2: LayerNorm::new(&mut ps, &format!("blk{l}.ln2"), d),
                        ffn: FeedForward::new(&mut ps, &mut rng, &format!("blk{l}.ffn"), d, d),
                    })
                    .collect();
                let final_ln = LayerNorm::new(&mut ps, "final_ln", d);
                Encoder::Attention { pos_emb, blocks, final_ln }
            }
            TargetKind::Recurrent => {
                let cells = (0..config.layers)
                    .map(|l| GruCell {
                        input: Linear::new(&mut ps, &mut rng, &format!("gru{l}.in"), d, 3 * d),
                        hidden_zr: ps.add(format!("gru{l}.hzr"), glorot(&mut rng, d, 2 * d)),
                        hidden_c: ps.add(format!("gru{l}.hc"), glorot(&mut rng, d, d)),
                    })
                    .collect();
                Encoder::Recurrent { cells }
            }
        };
        Ok(Self { config, num_items, item_emb, encoder, params: ps })
    }

    pub fn item_embedding_handle(&self) -> usize {
        self.item_emb
    }

    pub(crate) fn tokens(&self, items: &[ItemId]) -> Result<Vec<usize>> {
        if let Some(&bad) = items.iter().find(|&&it| it == 0 || it as usize > self.num_items) {
            return Err(Error::InvalidArgument(format!("item {bad} outside vocabulary 1..={}", self.num_items)));
        }
        let mut t: Vec<usize> = items.iter().map(|&x| x as usize).collect();
        truncate_front(&mut t, self.config.max_len);
        Ok(t)
    }

    /// Causal hidden states, one row per input position (`T×d`).
    pub(crate) fn hidden_graph<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        tokens: &[usize],
        mut train: Option<&mut Train<'_, R>>,
    ) -> Var {
        let mut x = g.gather(p[self.item_emb], tokens);
        let d = self.config.embed_dim;
        match &self.encoder {
            Encoder::Attention { pos_emb, blocks, final_ln } => {
                // Right-aligned, as with left padding: the newest item always
                // sees the last positional row.
                let offset = self.config.max_len - tokens.len();
                let positions: Vec<usize> = (offset..self.config.max_len).collect();
                let pe = g.gather(p[*pos_emb], &positions);
                x = g.add(x, pe);
                if let Some(t) = train.as_deref_mut() {
                    x = dropout(g, x, t.rate, t.rng);
                }
                for blk in blocks {
                    let q = blk.ln1.forward(g, p, x);
                    let mut a = blk.attn.forward(g, p, q, q, true);
                    if let Some(t) = train.as_deref_mut() {
                        a = dropout(g, a, t.rate, t.rng);
                    }
                    x = g.add(x, a);
                    let h = blk.ln2.forward(g, p, x);
                    let mut f = blk.ffn.forward(g, p, h);
                    if let Some(t) = train.as_deref_mut() {
                        f = dropout(g, f, t.rate, t.rng);
                    }
                    x = g.add(x, f);
                }
                final_ln.forward(g, p, x)
            }
            Encoder::Recurrent { cells } => {
                if let Some(t) = train.as_deref_mut() {
                    x = dropout(g, x, t.rate, t.rng);
                }
                for cell in cells {
                    let gx = cell.input.forward(g, p, x);
                    let mut h = g.constant_f64(&Mat::zeros(1, d));
                    let mut rows = Vec::with_capacity(tokens.len());
                    for t in 0..tokens.len() {
                        let gt = g.slice_rows(gx, t, 1);
                        let gzr_x = g.slice_cols(gt, 0, 2 * d);
                        let gc_x = g.slice_cols(gt, 2 * d, d);
                        let gzr_h = g.matmul(h, p[cell.hidden_zr]);
                        let pre = g.add(gzr_x, gzr_h);
                        let zr = g.sigmoid(pre);
                        let z = g.slice_cols(zr, 0, d);
                        let r = g.slice_cols(zr, d, d);
                        let rh = g.mul(r, h);
                        let gc_h = g.matmul(rh, p[cell.hidden_c]);
                        let pre_c = g.add(gc_x, gc_h);
                        let cand = g.tanh(pre_c);
                        let delta = g.sub(cand, h);
                        let step = g.mul(z, delta);
                        h = g.add(h, step);
                        rows.push(h);
                    }
                    x = g.concat_rows(&rows);
                }
                x
            }
        }
    }

    /// Per-position loss `−log σ(h_{t−1}·v_t) − log(1 − σ(h_{t−1}·v_neg))`
    /// for `t = 2..=T`, as a `(T−1)×1` column.
    pub(crate) fn position_loss_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        hidden: Var,
        tokens: &[usize],
        negatives: &[usize],
    ) -> Var {
        let n = tokens.len() - 1;
        debug_assert_eq!(negatives.len(), n);
        let prev = g.slice_rows(hidden, 0, n);
        let pos = g.gather(p[self.item_emb], &tokens[1..]);
        let neg = g.gather(p[self.item_emb], negatives);
        let lp = g.row_dot(prev, pos);
        let ln = g.row_dot(prev, neg);
        let a = g.log_sigmoid(lp);
        let ln_flip = g.scale(ln, -1.0);
        let b = g.log_sigmoid(ln_flip);
        let s = g.add(a, b);
        g.scale(s, -1.0)
    }

    /// Hidden states `h_1..h_T` (evaluation mode), `T×d`.
    pub fn hidden_states(&self, items: &[ItemId]) -> Result<Mat<f64>> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty item sequence".into()));
        }
        let tokens = self.tokens(items)?;
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g);
        let h = self.hidden_graph::<f64, ChaCha8Rng>(&mut g, &p, &tokens, None);
        Ok(g.value(h).clone())
    }

    fn check_loss_inputs(&self, pattern: &[ItemId], negatives: &[ItemId], weights: &[f64]) -> Result<()> {
        if pattern.len() < 2 {
            return Err(Error::InvalidArgument("next-item loss needs a pattern of length ≥ 2".into()));
        }
        if pattern.len() > self.config.max_len {
            return Err(Error::InvalidArgument(format!("pattern longer than max_len {}", self.config.max_len)));
        }
        if negatives.len() != pattern.len() - 1 || weights.len() != pattern.len() - 1 {
            return Err(Error::InvalidArgument("need one negative and one weight per position t ≥ 2".into()));
        }
        Ok(())
    }

    /// `Σ_t w_t · ℓ_t` for one pattern (evaluation mode).
    pub fn next_item_loss(&self, pattern: &[ItemId], negatives: &[ItemId], weights: &[f64]) -> Result<f64> {
        Ok(self.next_item_loss_impl(pattern, negatives, weights, false)?.0)
    }

    /// Loss and its gradient with respect to all parameters (flat).
    pub fn next_item_loss_and_grad(
        &self,
        pattern: &[ItemId],
        negatives: &[ItemId],
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let (l, g) = self.next_item_loss_impl(pattern, negatives, weights, true)?;
        Ok((l, g.unwrap()))
    }

    fn next_item_loss_impl(
        &self,
        pattern: &[ItemId],
        negatives: &[ItemId],
        weights: &[f64],
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        self.check_loss_inputs(pattern, negatives, weights)?;
        let tokens = self.tokens(pattern)?;
        let negs = self.tokens(negatives)?;
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g);
        let h = self.hidden_graph::<f64, ChaCha8Rng>(&mut g, &p, &tokens, None);
        let per = self.position_loss_graph(&mut g, &p, h, &tokens, &negs);
        let w = g.constant_f64(&Mat::from_vec(weights.len(), 1, weights.to_vec()));
        let weighted = g.mul(per, w);
        let loss = g.sum(weighted);
        let grad = want_grad.then(|| self.params.flat_grad(&g.backward(loss), &p));
        Ok((g.scalar_value(loss), grad))
    }

    /// Dot product of the last hidden state with every item embedding.
    pub fn score_all_items(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        let h = self.hidden_states(prefix)?;
        let last = h.row(h.rows - 1);
        let emb = self.params.get(self.item_emb);
        Ok((1..=self.num_items).map(|i| emb.row(i).iter().zip(last).map(|(a, b)| a * b).sum()).collect())
    }
}

impl ItemScorer for TargetModel {
    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score_all(&self, prefix: &[ItemId]) -> Vec<f64> {
        self.score_all_items(prefix).expect("prefix validated by caller")
    }
}

/// One uniformly drawn negative per position `t ≥ 2`, never colliding with
/// any item of the pattern.
pub fn sample_negatives(pattern: &[ItemId], num_items: usize, rng: &mut impl Rng) -> Result<Vec<ItemId>> {
    let mut distinct: Vec<ItemId> = pattern.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() >= num_items {
        return Err(Error::VocabularyExhausted(num_items));
    }
    Ok((1..pattern.len())
        .map(|_| loop {
            let c = rng.gen_range(1..=num_items) as ItemId;
            if distinct.binary_search(&c).is_err() {
                break c;
            }
        })
        .collect())
}

/// Per-sample weights for the training loss.
pub trait SampleWeigher {
    /// Weights for positions `t = 2..=T`, given the detached hidden states
    /// `h_1..h_T` of the pattern (`T×d`).
    fn weigh(&mut self, hidden: &Mat<f64>) -> Vec<f64>;
}

/// Every sample weighted by one.
pub struct UnitWeights;

impl SampleWeigher for UnitWeights {
    fn weigh(&mut self, hidden: &Mat<f64>) -> Vec<f64> {
        vec![1.0; hidden.rows.saturating_sub(1)]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs_run: usize,
    pub epoch_loss: Vec<f64>,
    pub val_ndcg: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_ndcg: f64,
    pub inner_steps: usize,
}

/// Epoch/step driver shared by plain training and the bi-level engine.
pub struct TargetTrainer {
    pub model: TargetModel,
    opt: Adam,
    rng: ChaCha8Rng,
    val: Vec<HeldOut>,
    pub history: TrainHistory,
    best: Option<ParamSet>,
    bad_epochs: usize,
}

pub struct StepOutcome {
    pub loss: f64,
    pub mean_weight: f64,
}

impl TargetTrainer {
    pub fn new(model: TargetModel, val: &[HeldOut], seed: u64) -> Self {
        let opt = Adam::new(model.config.learning_rate, model.params.num_scalars());
        Self {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x5441_5247)),
            val: val.to_vec(),
            history: TrainHistory { best_val_ndcg: f64::NEG_INFINITY, ..Default::default() },
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Shuffled index batches covering `0..n`.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.model.config.batch_size).map(|c| c.to_vec()).collect()
    }

    /// One Adam step on the weighted next-item loss of `batch`, normalised
    /// by the number of loss terms.
    pub fn step(&mut self, batch: &[&[ItemId]], weigher: &mut dyn SampleWeigher) -> Result<StepOutcome> {
        let model = &self.model;
        let mut g = Graph::<f64>::new();
        let p = model.params.bind(&mut g);
        let mut terms = Vec::new();
        let mut count = 0usize;
        let mut weight_sum = 0.0;
        for items in batch {
            let tokens = model.tokens(items)?;
            if tokens.len() < 2 {
                continue;
            }
            let mut train = Train { rate: model.config.dropout, rng: &mut self.rng };
            let h = model.hidden_graph(&mut g, &p, &tokens, Some(&mut train));
            let as_items: Vec<ItemId> = tokens.iter().map(|&t| t as ItemId).collect();
            let negs: Vec<usize> =
                sample_negatives(&as_items, model.num_items, &mut self.rng)?.into_iter().map(|x| x as usize).collect();
            let per = model.position_loss_graph(&mut g, &p, h, &tokens, &negs);
            let w = weigher.weigh(g.value(h));
            weight_sum += w.iter().sum::<f64>();
            count += w.len();
            let wv = g.constant_f64(&Mat::from_vec(w.len(), 1, w));
            let weighted = g.mul(per, wv);
            terms.push(g.sum(weighted));
        }
        if terms.is_empty() {
            return Ok(StepOutcome { loss: 0.0, mean_weight: 0.0 });
        }
        let stacked = if terms.len() == 1 { terms[0] } else { g.concat_rows(&terms) };
        let total = g.sum(stacked);
        let loss = g.scale(total, 1.0 / count as f64);
        let value = g.scalar_value(loss);
        let grad = model.params.flat_grad(&g.backward(loss), &p);
        if !value.is_finite() || grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged { epoch: self.history.epochs_run, loss: value });
        }
        self.apply_gradient(&grad);
        Ok(StepOutcome { loss: value, mean_weight: weight_sum / count as f64 })
    }

    /// Adam step on θ with an externally computed gradient.
    pub fn apply_gradient(&mut self, grad: &[f64]) {
        self.opt.step(&mut self.model.params, grad);
        self.history.inner_steps += 1;
    }

    /// Records the epoch, validates and reports whether to stop.
    pub fn end_epoch(&mut self, epoch_loss: f64) -> Result<bool> {
        let epoch = self.history.epochs_run;
        self.history.epochs_run += 1;
        self.history.epoch_loss.push(epoch_loss);
        if self.val.is_empty() {
            self.best = Some(self.model.params.clone());
            self.history.best_epoch = epoch;
            return Ok(false);
        }
        let ndcg = mean_ndcg(&self.model, &self.val, self.model.config.eval_k)?;
        self.history.val_ndcg.push(ndcg);
        debug!("target epoch {epoch}: loss {epoch_loss:.5} val ndcg@{} {ndcg:.4}", self.model.config.eval_k);
        if ndcg > self.history.best_val_ndcg {
            self.history.best_val_ndcg = ndcg;
            self.history.best_epoch = epoch;
            self.best = Some(self.model.params.clone());
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.model.config.patience {
                info!("target: early stop after epoch {epoch} (best {})", self.history.best_epoch);
                return Ok(true);
            }
        }
        Ok(false)
    }

    pub fn epochs_exhausted(&self) -> bool {
        self.history.epochs_run >= self.model.config.max_epochs
    }

    /// Best-validation parameters and the training history.
    pub fn finish(mut self) -> (TargetModel, TrainHistory) {
        if let Some(best) = self.best.take() {
            self.model.params = best;
        }
        (self.model, self.history)
    }
}

/// Trains a target model on `train` sequences, early-stopping on validation
/// NDCG over `val` (leave-one-out targets of the original data).
pub fn train_target(
    train: &[Vec<ItemId>],
    val: &[HeldOut],
    num_items: usize,
    cfg: &TargetModelConfig,
    weigher: &mut dyn SampleWeigher,
    seed: u64,
) -> Result<(TargetModel, TrainHistory)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("target training set".into()));
    }
    let model = TargetModel::new(cfg.clone(), num_items, seed)?;
    let mut trainer = TargetTrainer::new(model, val, seed);
    while !trainer.epochs_exhausted() {
        let mut loss_sum = 0.0;
        let batches = trainer.epoch_batches(train.len());
        for b in &batches {
            let batch: Vec<&[ItemId]> = b.iter().map(|&i| &train[i][..]).collect();
            loss_sum += trainer.step(&batch, weigher)?.loss;
        }
        if trainer.end_epoch(loss_sum / batches.len() as f64)? {
            break;
        }
    }
    Ok(trainer.finish())
}
