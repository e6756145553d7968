//! Hybrid greedy inference: each memory is decoded on its own; every step
//! flips a `γ`-biased coin between generative mode (argmax over the whole
//! vocabulary) and restrictive mode (argmax over the source items).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RegeneratorModel;
use crate::corpus::{Dataset, ItemId, Sequence};
use crate::error::{io_err, Error, Result};
use crate::seeds::mix64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegeneratedPattern {
    pub items: Vec<ItemId>,
    pub memory_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_user: u64,
    pub memory_index: usize,
}

/// Regenerated dataset `X′`; `provenance[i]` describes `dataset.sequences[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegeneratedCorpus {
    pub dataset: Dataset,
    pub provenance: Vec<Provenance>,
}

impl RegeneratedCorpus {
    /// `<pattern_user_id> <source_user_id> <memory_index>`, where the first
    /// column is the pattern's user id in the regenerated dataset file.
    pub fn provenance_text(&self) -> String {
        let mut out = String::new();
        for (s, p) in self.dataset.sequences.iter().zip(&self.provenance) {
            writeln!(out, "{} {} {}", s.user_id, p.source_user, p.memory_index).unwrap();
        }
        out
    }

    pub fn write(&self, dataset_path: impl AsRef<Path>, provenance_path: impl AsRef<Path>) -> Result<()> {
        self.dataset.write(dataset_path)?;
        let path = provenance_path.as_ref();
        std::fs::write(path, self.provenance_text()).map_err(io_err(path))
    }

    pub fn mean_length(&self) -> f64 {
        self.dataset.num_interactions() as f64 / self.dataset.len().max(1) as f64
    }
}

fn argmax(logits: &[f64], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (t, &v) in logits.iter().enumerate() {
        if allowed(t) && (best == usize::MAX || v > best_v) {
            best = t;
            best_v = v;
        }
    }
    best
}

/// Decodes one pattern per memory space of `seq`. Patterns shorter than two
/// items are dropped and duplicates collapse onto the first memory that
/// produced them.
pub fn regenerate_sequence(
    model: &RegeneratorModel,
    seq: &[ItemId],
    gamma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<RegeneratedPattern>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("γ = {gamma} outside [0, 1]")));
    }
    let bank = model.encode(seq)?;
    let vocab = model.vocab;
    let (bos, eos) = (vocab.bos(), vocab.eos());
    let source: BTreeSet<usize> = seq.iter().map(|&x| x as usize).collect();
    let mut out: Vec<RegeneratedPattern> = Vec::new();
    for (k, memory) in bank.memories.iter().enumerate() {
        let mut tokens = vec![bos];
        for _ in 0..model.config.max_pattern_len {
            let logits = model.next_token_logits(memory, &tokens);
            let generative = rng.gen::<f64>() < gamma;
            let next = if generative {
                argmax(&logits, |t| t != 0 && t != bos)
            } else {
                argmax(&logits, |t| t == eos || source.contains(&t))
            };
            if next == eos {
                break;
            }
            tokens.push(next);
        }
        let items: Vec<ItemId> = tokens[1..].iter().map(|&t| t as ItemId).collect();
        if items.len() >= 2 && !out.iter().any(|p| p.items == items) {
            out.push(RegeneratedPattern { items, memory_index: k });
        }
    }
    Ok(out)
}

/// Runs [`regenerate_sequence`] over every sequence of `ds`. Each sequence
/// gets its own random stream derived from `seed` and its index, so output
/// order and content do not depend on scheduling.
pub fn regenerate_dataset(
    model: &RegeneratorModel,
    ds: &Dataset,
    gamma: f64,
    seed: u64,
    global_dedup: bool,
) -> Result<RegeneratedCorpus> {
    let mut sequences = Vec::new();
    let mut provenance = Vec::new();
    let mut seen: BTreeSet<Vec<ItemId>> = BTreeSet::new();
    for (i, s) in ds.sequences.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(i as u64)));
        for pat in regenerate_sequence(model, &s.items, gamma, &mut rng)? {
            if global_dedup && !seen.insert(pat.items.clone()) {
                continue;
            }
            sequences.push(Sequence { user_id: sequences.len() as u64, items: pat.items });
            provenance.push(Provenance { source_user: s.user_id, memory_index: pat.memory_index });
        }
    }
    if sequences.is_empty() {
        return Err(Error::EmptyDataset(format!("{}-regenerated", ds.name)));
    }
    let dataset = Dataset { name: format!("{}-regenerated", ds.name), num_items: model.num_items(), sequences };
    Ok(RegeneratedCorpus { dataset, provenance })
}
