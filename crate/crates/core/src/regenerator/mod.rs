//! Diversity-promoted encoder-decoder that maps an interaction sequence to
//! item-transition patterns.
//!
//! The encoder output is projected into `K` memory spaces. During
//! pre-training a separate pattern encoder summarises the gold pattern into a
//! probability vector `π` over those spaces, and the decoder cross-attends to
//! the `π`-weighted mixture. At inference there is no gold pattern, so each
//! memory is decoded on its own, yielding up to `K` patterns per sequence.

mod decode;
mod train;

use autodiff::{Graph, Mat, ParamSet, RowMask, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{truncate_front, ItemId};
use crate::error::{Error, Result};
use crate::nn::{normal, DecoderBlock, EncoderBlock, Linear};

pub use decode::{regenerate_dataset, regenerate_sequence, RegeneratedCorpus, RegeneratedPattern, Provenance};
pub use train::{pretrain, PretrainReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPooling {
    /// One memory vector per source position.
    #[default]
    None,
    /// Mean-pool each memory to a single vector.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegeneratorConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Number of memory spaces `K`.
    pub diversity_k: usize,
    /// Longest source sequence fed to the encoder (most recent items kept).
    pub max_src_len: usize,
    /// Longest pattern the decoder emits (excluding BOS/EOS).
    pub max_pattern_len: usize,
    pub memory_pooling: MemoryPooling,
    /// Softmax temperature of the promoter; values below one sharpen `π`
    /// towards a single memory, which is how inference decodes.
    pub promoter_temperature: f64,
    /// Pattern encoder reuses the main token embeddings.
    pub share_embeddings: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of pairs held out for early stopping; `0` stops on the
    /// training loss instead.
    pub holdout_fraction: f64,
}

impl Default for RegeneratorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            diversity_k: 5,
            max_src_len: 50,
            max_pattern_len: 10,
            memory_pooling: MemoryPooling::None,
            promoter_temperature: 1.0,
            share_embeddings: true,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            patience: 20,
            holdout_fraction: 0.1,
        }
    }
}

impl RegeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("regenerator config: {m}")));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if self.diversity_k == 0 {
            return bad("diversity_k must be ≥ 1");
        }
        if !(self.promoter_temperature > 0.0 && self.promoter_temperature.is_finite()) {
            return bad("promoter_temperature must be positive");
        }
        if self.max_src_len == 0 || self.max_pattern_len < 2 {
            return bad("max_src_len ≥ 1 and max_pattern_len ≥ 2 required");
        }
        if self.batch_size == 0 || !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("batch_size ≥ 1 and holdout_fraction ∈ [0, 1) required");
        }
        Ok(())
    }
}

/// Token layout: `0` PAD, `1..=V` items, `V+1` BOS, `V+2` EOS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_items: usize,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub fn bos(&self) -> usize {
        self.num_items + 1
    }
    pub fn eos(&self) -> usize {
        self.num_items + 2
    }
    pub fn size(&self) -> usize {
        self.num_items + 3
    }
    /// Tokens that may carry output probability: everything but PAD.
    pub fn output_mask(&self) -> Vec<bool> {
        (0..self.size()).map(|t| t != Self::PAD).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    tok_emb: usize,
    pat_emb: Option<usize>,
    src_pos: usize,
    tgt_pos: usize,
    encoder: Vec<EncoderBlock>,
    projections: Vec<Linear>,
    pattern_encoder: Vec<EncoderBlock>,
    promoter: Linear,
    decoder: Vec<DecoderBlock>,
    output: Linear,
}

/// `K` projected memories of one source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub memories: Vec<Mat<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegeneratorModel {
    pub config: RegeneratorConfig,
    pub vocab: Vocab,
    layout: Layout,
    pub params: ParamSet,
}

impl RegeneratorModel {
    pub fn new(config: RegeneratorConfig, num_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::InvalidArgument("vocabulary is empty".into()));
        }
        let vocab = Vocab { num_items };
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let tok_emb = ps.add("tok_emb", normal(&mut rng, vocab.size(), d, 0.1));
        let pat_emb = (!config.share_embeddings).then(|| ps.add("pat_emb", normal(&mut rng, vocab.size(), d, 0.1)));
        let src_pos = ps.add("src_pos", normal(&mut rng, config.max_src_len, d, 0.1));
        let tgt_pos = ps.add("tgt_pos", normal(&mut rng, config.max_pattern_len + 1, d, 0.1));
        let encoder =
            (0..config.encoder_layers).map(|l| EncoderBlock::new(&mut ps, &mut rng, &format!("enc{l}"), d, config.heads)).collect();
        let projections =
            (0..config.diversity_k).map(|k| Linear::new(&mut ps, &mut rng, &format!("proj{k}"), d, d)).collect();
        let pattern_encoder = (0..config.encoder_layers.max(1))
            .map(|l| EncoderBlock::new(&mut ps, &mut rng, &format!("penc{l}"), d, config.heads))
            .collect();
        let promoter = Linear::new(&mut ps, &mut rng, "promoter", d, config.diversity_k);
        let decoder =
            (0..config.decoder_layers).map(|l| DecoderBlock::new(&mut ps, &mut rng, &format!("dec{l}"), d, config.heads)).collect();
        let output = Linear::new(&mut ps, &mut rng, "output", d, vocab.size());
        let layout =
            Layout { tok_emb, pat_emb, src_pos, tgt_pos, encoder, projections, pattern_encoder, promoter, decoder, output };
        Ok(Self { config, vocab, layout, params: ps })
    }

    pub fn num_items(&self) -> usize {
        self.vocab.num_items
    }

    /// Handle of the output projection `(weight, bias)`.
    pub fn output_layer(&self) -> (usize, usize) {
        (self.layout.output.w, self.layout.output.b)
    }

    /// Handle of the promoter map `(weight, bias)`.
    pub fn promoter_layer(&self) -> (usize, usize) {
        (self.layout.promoter.w, self.layout.promoter.b)
    }

    fn check_items(&self, items: &[ItemId]) -> Result<()> {
        if let Some(&bad) = items.iter().find(|&&it| it == 0 || it as usize > self.vocab.num_items) {
            return Err(Error::InvalidArgument(format!("item {bad} outside vocabulary 1..={}", self.vocab.num_items)));
        }
        Ok(())
    }

    fn source_tokens(&self, seq: &[ItemId]) -> Vec<usize> {
        let mut s: Vec<usize> = seq.iter().map(|&x| x as usize).collect();
        truncate_front(&mut s, self.config.max_src_len);
        s
    }

    fn embed<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], table: usize, pos: usize, tokens: &[usize]) -> Var {
        let e = g.gather(p[table], tokens);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pe = g.gather(p[pos], &positions);
        g.add(e, pe)
    }

    /// Encoder followed by the `K` position-wise projections.
    pub(crate) fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], src: &[usize]) -> Vec<Var> {
        let mut x = self.embed(g, p, self.layout.tok_emb, self.layout.src_pos, src);
        for blk in &self.layout.encoder {
            x = blk.forward(g, p, x, false);
        }
        self.layout
            .projections
            .iter()
            .map(|proj| {
                let m = proj.forward(g, p, x);
                match self.config.memory_pooling {
                    MemoryPooling::None => m,
                    MemoryPooling::Mean => g.mean_rows(m),
                }
            })
            .collect()
    }

    /// `1×K` probability row for a pattern.
    pub(crate) fn promote_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], pattern: &[usize]) -> Var {
        let table = self.layout.pat_emb.unwrap_or(self.layout.tok_emb);
        let mut x = self.embed(g, p, table, self.layout.tgt_pos, pattern);
        for blk in &self.layout.pattern_encoder {
            x = blk.forward(g, p, x, false);
        }
        let pooled = g.mean_rows(x);
        let logits = self.layout.promoter.forward(g, p, pooled);
        let logits = if self.config.promoter_temperature == 1.0 {
            logits
        } else {
            g.scale(logits, 1.0 / self.config.promoter_temperature)
        };
        g.softmax_rows(logits, RowMask::None)
    }

    pub(crate) fn mix_graph<T: Scalar>(g: &mut Graph<T>, memories: &[Var], pi: Var) -> Var {
        let mut acc: Option<Var> = None;
        for (k, &m) in memories.iter().enumerate() {
            let w = g.slice_cols(pi, k, 1);
            let term = g.scale_by(m, w);
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term),
            });
        }
        acc.expect("at least one memory")
    }

    /// Decoder logits (`len(inputs) × vocab`) given decoder input tokens.
    pub(crate) fn decode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], inputs: &[usize], memory: Var) -> Var {
        let mut x = self.embed(g, p, self.layout.tok_emb, self.layout.tgt_pos, inputs);
        for blk in &self.layout.decoder {
            x = blk.forward(g, p, x, memory);
        }
        self.layout.output.forward(g, p, x)
    }

    /// Summed token NLL of one (source, pattern) pair under teacher forcing,
    /// conditioned on the `π`-mixed memory. Returns `(nll, tokens)`.
    pub(crate) fn pair_nll_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        memories: &[Var],
        pattern: &[ItemId],
        mask: &[bool],
    ) -> (Var, usize) {
        let pat: Vec<usize> = pattern.iter().map(|&x| x as usize).collect();
        let pi = self.promote_graph(g, p, &pat);
        let mixed = Self::mix_graph(g, memories, pi);
        let mut inputs = Vec::with_capacity(pat.len() + 1);
        inputs.push(self.vocab.bos());
        inputs.extend_from_slice(&pat);
        let mut targets = pat;
        targets.push(self.vocab.eos());
        let logits = self.decode_graph(g, p, &inputs, mixed);
        (g.cross_entropy(logits, &targets, Some(mask)), targets.len())
    }

    pub fn encode(&self, seq: &[ItemId]) -> Result<MemoryBank> {
        if seq.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
        }
        self.check_items(seq)?;
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g);
        let mems = self.encode_graph(&mut g, &p, &self.source_tokens(seq));
        Ok(MemoryBank { memories: mems.into_iter().map(|m| g.value(m).clone()).collect() })
    }

    pub fn promote(&self, pattern: &[ItemId]) -> Result<Vec<f64>> {
        if pattern.is_empty() {
            return Err(Error::InvalidArgument("cannot promote an empty pattern".into()));
        }
        self.check_items(pattern)?;
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g);
        let tokens: Vec<usize> = pattern.iter().map(|&x| x as usize).collect();
        let pi = self.promote_graph(&mut g, &p, &tokens);
        Ok(g.value(pi).data.clone())
    }

    /// Mean per-token negative log-likelihood over a batch of
    /// `(source, pattern)` pairs.
    pub fn reconstruction_loss(&self, batch: &[(&[ItemId], &[ItemId])]) -> Result<f64> {
        Ok(self.loss_graph::<f64>(&self.params, batch, false)?.0)
    }

    /// Loss and its gradient (flat, in [`ParamSet::flat`] order).
    pub fn reconstruction_loss_and_grad(&self, batch: &[(&[ItemId], &[ItemId])]) -> Result<(f64, Vec<f64>)> {
        let (loss, grad) = self.loss_graph::<f64>(&self.params, batch, true)?;
        Ok((loss, grad.unwrap()))
    }

    fn loss_graph<T: Scalar>(
        &self,
        params: &ParamSet,
        batch: &[(&[ItemId], &[ItemId])],
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mask = self.vocab.output_mask();
        let mut g = Graph::<T>::new();
        let p = params.bind(&mut g);
        let mut terms = Vec::with_capacity(batch.len());
        let mut tokens = 0;
        // Consecutive pairs sharing a source reuse its encoding.
        let mut cache: Option<(&[ItemId], Vec<Var>)> = None;
        for &(src, pat) in batch {
            if src.is_empty() || pat.is_empty() {
                return Err(Error::InvalidArgument("empty source or pattern in batch".into()));
            }
            if pat.len() > self.config.max_pattern_len {
                return Err(Error::InvalidArgument(format!(
                    "pattern of length {} exceeds max_pattern_len {}",
                    pat.len(),
                    self.config.max_pattern_len
                )));
            }
            self.check_items(src)?;
            self.check_items(pat)?;
            let mems = match &cache {
                Some((s, m)) if *s == src => m.clone(),
                _ => {
                    let m = self.encode_graph(&mut g, &p, &self.source_tokens(src));
                    cache = Some((src, m.clone()));
                    m
                }
            };
            let (nll, n) = self.pair_nll_graph(&mut g, &p, &mems, pat, &mask);
            terms.push(nll);
            tokens += n;
        }
        let total = if terms.len() == 1 { terms[0] } else { g.concat_rows(&terms) };
        let total = g.sum(total);
        let loss = g.scale(total, 1.0 / tokens as f64);
        let value = g.scalar_value(loss).re();
        let grad = want_grad.then(|| params.flat_grad(&g.backward(loss), &p).iter().map(|x| x.re()).collect());
        Ok((value, grad))
    }

    /// Logits for the next token after `prefix` (decoder input tokens,
    /// starting with BOS), conditioned on `memory`.
    pub(crate) fn next_token_logits(&self, memory: &Mat<f64>, prefix: &[usize]) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g);
        let m = g.leaf(memory.clone());
        let logits = self.decode_graph(&mut g, &p, prefix, m);
        let v = g.value(logits);
        v.row(v.rows - 1).to_vec()
    }
}

/// Position-wise convex combination `Σ_k π_k · memory_k`.
pub fn mix_memories(bank: &MemoryBank, pi: &[f64]) -> Result<Mat<f64>> {
    if pi.len() != bank.memories.len() {
        return Err(Error::InvalidArgument(format!("π has {} entries for {} memories", pi.len(), bank.memories.len())));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidArgument(format!("π sums to {total}, not 1")));
    }
    let first = &bank.memories[0];
    let mut out = Mat::zeros(first.rows, first.cols);
    for (m, &w) in bank.memories.iter().zip(pi) {
        for (o, &x) in out.data.iter_mut().zip(&m.data) {
            *o += w * x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(super) fn tiny(k: usize) -> RegeneratorConfig {
        RegeneratorConfig {
            embed_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            diversity_k: k,
            max_src_len: 12,
            max_pattern_len: 4,
            ..RegeneratorConfig::default()
        }
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = RegeneratorModel::new(tiny(3), 9, 1).unwrap();
        let a = m.encode(&[1, 2, 3, 4]).unwrap();
        assert_eq!(a.memories.len(), 3);
        assert_eq!(a.memories[0].shape(), (4, 8));
        assert_eq!(a, m.encode(&[1, 2, 3, 4]).unwrap());
        let diff: f64 =
            a.memories[0].data.iter().zip(&a.memories[1].data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(diff > 0.0);
        assert!(m.encode(&[]).is_err());
        assert!(m.encode(&[10]).is_err());
    }

    #[test]
    fn mean_pooling_collapses_positions() {
        let cfg = RegeneratorConfig { memory_pooling: MemoryPooling::Mean, ..tiny(2) };
        let m = RegeneratorModel::new(cfg, 9, 1).unwrap();
        assert_eq!(m.encode(&[1, 2, 3]).unwrap().memories[0].shape(), (1, 8));
    }

    #[test]
    fn promote_single_memory_is_one() {
        let m = RegeneratorModel::new(tiny(1), 9, 2).unwrap();
        assert_eq!(m.promote(&[3, 4]).unwrap(), vec![1.0]);
    }

    #[test]
    fn promote_equal_logits_is_uniform() {
        let mut m = RegeneratorModel::new(tiny(4), 9, 2).unwrap();
        let (w, b) = m.promoter_layer();
        m.params.get_mut(w).data.fill(0.0);
        m.params.get_mut(b).data.fill(0.3);
        for v in m.promote(&[1, 5, 2]).unwrap() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn mix_one_hot_and_average() {
        let bank = MemoryBank {
            memories: vec![Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]), Mat::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0])],
        };
        assert_eq!(mix_memories(&bank, &[0.0, 1.0]).unwrap(), bank.memories[1]);
        assert_eq!(mix_memories(&bank, &[0.5, 0.5]).unwrap().data, vec![3.0, 4.0, 5.0, 6.0]);
        assert!(mix_memories(&bank, &[0.5, 0.6]).is_err());
        assert!(mix_memories(&bank, &[1.0]).is_err());
    }

    #[test]
    fn uniform_decoder_gives_log_vocab_loss() {
        let mut m = RegeneratorModel::new(tiny(2), 9, 3).unwrap();
        let (w, b) = m.output_layer();
        m.params.get_mut(w).data.fill(0.0);
        m.params.get_mut(b).data.fill(0.0);
        let loss = m.reconstruction_loss(&[(&[1, 2, 3][..], &[1, 3][..])]).unwrap();
        assert!((loss - (11.0f64).ln()).abs() < 1e-12, "{loss}");
    }
}
