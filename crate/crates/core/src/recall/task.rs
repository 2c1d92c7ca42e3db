//! Multi-query associative recall data.
//!
//! Token 0 is padding. Keys are drawn from `1..=num_keys` and values from
//! the remaining ids, so a key token can never be mistaken for a value.
//! A sequence lists `num_pairs` key/value bindings, pads, and ends with
//! `num_queries` keys; the target at each query is the value bound earlier.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const PAD: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallTaskConfig {
    pub vocab_size: usize,
    pub num_pairs: usize,
    pub num_queries: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl RecallTaskConfig {
    /// Ids `1..=num_keys` are keys; the rest of the non-pad ids are values.
    pub fn num_keys(&self) -> usize {
        self.vocab_size.saturating_sub(1) / 2
    }

    pub fn value_range(&self) -> std::ops::Range<u32> {
        (self.num_keys() as u32 + 1)..self.vocab_size as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 || self.num_queries == 0 {
            return invalid("recall task needs at least one pair and one query");
        }
        if self.seq_len < 2 * self.num_pairs + self.num_queries {
            return invalid(format!(
                "seq_len {} is shorter than 2*{} pairs + {} queries",
                self.seq_len, self.num_pairs, self.num_queries
            ));
        }
        if self.num_keys() < self.num_pairs || self.value_range().is_empty() {
            return invalid(format!(
                "vocab_size {} leaves {} key ids, too few for {} distinct keys",
                self.vocab_size,
                self.num_keys(),
                self.num_pairs
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RecallSequence {
    pub tokens: Vec<u32>,
    /// `(position, target value)` for every query.
    pub queries: Vec<(usize, u32)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RecallDataset {
    pub task: RecallTaskConfig,
    pub sequences: Vec<RecallSequence>,
}

impl RecallDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_queries(&self) -> usize {
        self.sequences.iter().map(|s| s.queries.len()).sum()
    }
}

pub fn gen_sequence<R: Rng + ?Sized>(cfg: &RecallTaskConfig, rng: &mut R) -> RecallSequence {
    let keys: Vec<u32> = sample(rng, cfg.num_keys(), cfg.num_pairs)
        .into_iter()
        .map(|i| i as u32 + 1)
        .collect();
    let values = cfg.value_range();
    let bound: Vec<u32> = keys.iter().map(|_| rng.gen_range(values.clone())).collect();

    let mut tokens = Vec::with_capacity(cfg.seq_len);
    for (k, v) in keys.iter().zip(&bound) {
        tokens.push(*k);
        tokens.push(*v);
    }
    tokens.resize(cfg.seq_len - cfg.num_queries, PAD);

    // distinct queries while they last, then with replacement
    let mut order: Vec<usize> = Vec::with_capacity(cfg.num_queries);
    while order.len() < cfg.num_queries {
        let take = (cfg.num_queries - order.len()).min(cfg.num_pairs);
        order.extend(sample(rng, cfg.num_pairs, take).into_iter());
    }
    let mut queries = Vec::with_capacity(cfg.num_queries);
    for i in order {
        queries.push((tokens.len(), bound[i]));
        tokens.push(keys[i]);
    }
    RecallSequence { tokens, queries }
}

/// `count` sequences, deterministic in `cfg.seed`.
pub fn gen_recall_dataset(cfg: &RecallTaskConfig, count: usize) -> Result<RecallDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sequences = (0..count).map(|_| gen_sequence(cfg, &mut rng)).collect();
    Ok(RecallDataset { task: cfg.clone(), sequences })
}
