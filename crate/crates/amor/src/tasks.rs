//! Seeded generators for the two synthetic retrieval tasks.
//!
//! Both tasks produce next-token prediction data: `targets[t] = tokens[t+1]`
//! with the final position masked out of the loss. `needs_retrieval[t]` is
//! true exactly where the target must be copied from a distant position.
//!
//! Simple Retrieval: local order-2 patterns (`A B A B ...`) interleaved
//! with mark events `M X` and later recall events `R X`, where the position
//! reading `R` must predict the `X` marked 20-50 tokens earlier.
//!
//! NeedleHaystack: a store phase of `STORE key value` triples, a noise
//! phase long enough to force recurrent state decay, then a query phase of
//! `QUERY key value` triples. Queries may ask for never-stored keys
//! ("impossible"); those predict the placeholder token and are labelled
//! separately.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{AmorError, Result};
use crate::rng::{derive_seed, Rng};

/// Number of special tokens appended after the content vocabulary.
pub const N_SPECIAL: usize = 3;

/// Which synthetic task to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    SimpleRetrieval,
    NeedleHaystack,
}

/// Generator configuration. Ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub content_vocab: usize,
    // Simple Retrieval parameters.
    pub retrieval_distance: (usize, usize),
    pub retrieval_prob: f64,
    pub block_len: (usize, usize),
    // NeedleHaystack parameters.
    pub n_pairs: (usize, usize),
    pub noise_len: (usize, usize),
    pub n_queries: (usize, usize),
    pub impossible_prob: f64,
}

impl TaskConfig {
    /// Simple Retrieval defaults: 128 tokens, 8 content + 3 special,
    /// retrieval distance 20-50, retrieval probability 15%.
    pub fn simple_retrieval() -> Self {
        TaskConfig {
            kind: TaskKind::SimpleRetrieval,
            seq_len: 128,
            content_vocab: 8,
            retrieval_distance: (20, 50),
            retrieval_prob: 0.15,
            block_len: (4, 8),
            n_pairs: (0, 0),
            noise_len: (0, 0),
            n_queries: (0, 0),
            impossible_prob: 0.0,
        }
    }

    /// NeedleHaystack defaults: 256 tokens, 16 content + 3 special, 2-5
    /// stored pairs, 50-150 noise tokens, 3-8 queries, no impossible
    /// queries.
    pub fn needle_haystack() -> Self {
        TaskConfig {
            kind: TaskKind::NeedleHaystack,
            seq_len: 256,
            content_vocab: 16,
            retrieval_distance: (0, 0),
            retrieval_prob: 0.0,
            block_len: (0, 0),
            n_pairs: (2, 5),
            noise_len: (50, 150),
            n_queries: (3, 8),
            impossible_prob: 0.0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.content_vocab + N_SPECIAL
    }

    /// First special token id: MARK (Simple) / STORE (NeedleHaystack).
    pub fn tok_mark(&self) -> usize {
        self.content_vocab
    }

    /// Second special token id: RECALL (Simple) / QUERY (NeedleHaystack).
    pub fn tok_recall(&self) -> usize {
        self.content_vocab + 1
    }

    /// Third special token id: PLACEHOLDER (both tasks).
    pub fn tok_placeholder(&self) -> usize {
        self.content_vocab + 2
    }

    pub fn validate(&self) -> Result<()> {
        let check_range = |name: &str, (lo, hi): (usize, usize)| -> Result<()> {
            if lo > hi {
                return Err(AmorError::TaskConfig(format!(
                    "{name} range {lo}..={hi} is empty"
                )));
            }
            Ok(())
        };
        let check_prob = |name: &str, p: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&p) {
                return Err(AmorError::TaskConfig(format!(
                    "{name} = {p} not in [0, 1]"
                )));
            }
            Ok(())
        };
        if self.content_vocab == 0 {
            return Err(AmorError::TaskConfig("content_vocab must be > 0".into()));
        }
        match self.kind {
            TaskKind::SimpleRetrieval => {
                check_range("retrieval_distance", self.retrieval_distance)?;
                check_range("block_len", self.block_len)?;
                check_prob("retrieval_prob", self.retrieval_prob)?;
                if self.block_len.0 == 0 {
                    return Err(AmorError::TaskConfig("block_len must be >= 1".into()));
                }
                let needed = self.retrieval_distance.1 + self.block_len.1;
                if self.seq_len < needed {
                    return Err(AmorError::TaskConfig(format!(
                        "seq_len {} < retrieval distance max + block size = {needed}",
                        self.seq_len
                    )));
                }
            }
            TaskKind::NeedleHaystack => {
                check_range("n_pairs", self.n_pairs)?;
                check_range("noise_len", self.noise_len)?;
                check_range("n_queries", self.n_queries)?;
                check_prob("impossible_prob", self.impossible_prob)?;
                if self.n_pairs.1 > self.content_vocab {
                    return Err(AmorError::TaskConfig(format!(
                        "n_pairs max {} exceeds content vocabulary {} (distinct keys exhausted)",
                        self.n_pairs.1, self.content_vocab
                    )));
                }
                // Impossible queries need at least one never-stored key.
                if self.impossible_prob > 0.0 && self.n_pairs.1 >= self.content_vocab {
                    return Err(AmorError::TaskConfig(
                        "impossible queries need an unused key".into(),
                    ));
                }
                let needed = 3 * self.n_pairs.1 + self.noise_len.1 + 3 * self.n_queries.1;
                if self.seq_len < needed {
                    return Err(AmorError::TaskConfig(format!(
                        "seq_len {} < store + max noise + query phases = {needed}",
                        self.seq_len
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One generated sequence with next-token targets and retrieval labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub needs_retrieval: Vec<bool>,
    pub impossible: Vec<bool>,
    pub seed: u64,
}

impl SequenceSample {
    /// Positions contributing to the loss: everything except the last
    /// (which has no next token).
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.tokens.len()];
        *m.last_mut().expect("non-empty sequence") = false;
        m
    }

    fn finish(tokens: Vec<usize>, needs: Vec<bool>, impossible: Vec<bool>, seed: u64) -> Self {
        let t = tokens.len();
        let mut targets = vec![0usize; t];
        for i in 0..t - 1 {
            targets[i] = tokens[i + 1];
        }
        SequenceSample {
            tokens,
            targets,
            needs_retrieval: needs,
            impossible,
            seed,
        }
    }
}

/// Generate one Simple Retrieval sequence.
///
/// The local-pattern pair `(a, b)` is drawn once per sequence; every block
/// alternates the same pair, so local positions stay predictable from
/// bigram context and prediction entropy concentrates on retrieval events.
pub fn gen_simple_retrieval(cfg: &TaskConfig, seed: u64) -> Result<SequenceSample> {
    if cfg.kind != TaskKind::SimpleRetrieval {
        return Err(AmorError::TaskConfig(
            "config is not a SimpleRetrieval config".into(),
        ));
    }
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let t = cfg.seq_len;
    let mut tokens: Vec<usize> = Vec::with_capacity(t);
    let mut needs = vec![false; t];

    // Per-sequence local pattern pair (distinct tokens).
    let a = rng.range_usize(0, cfg.content_vocab - 1);
    let b = {
        let offset = rng.range_usize(1, cfg.content_vocab - 1);
        (a + offset) % cfg.content_vocab
    };

    // (position where RECALL is due, value to recall)
    let mut pending: Option<(usize, usize)> = None;
    let mut block: Vec<usize> = Vec::new();
    // Successful rolls queue up; patterns run strictly one at a time so
    // every recall targets the most recent mark.
    let mut armed: usize = 0;

    while tokens.len() < t {
        let pos = tokens.len();
        if let Some((due, value)) = pending {
            if pos == due {
                // Inject the recall event, interrupting any current block.
                tokens.push(cfg.tok_recall());
                needs[pos] = true;
                tokens.push(value);
                pending = None;
                block.clear();
                continue;
            }
        }
        // Roll for a retrieval pattern at every position; successes queue
        // (capped) until the previous pattern's recall lands.
        if rng.chance(cfg.retrieval_prob) && armed < 2 {
            armed += 1;
        }
        if armed > 0 && pending.is_none() && pos + 1 < t {
            armed -= 1;
            let value = rng.range_usize(0, cfg.content_vocab - 1);
            tokens.push(cfg.tok_mark());
            tokens.push(value);
            let value_pos = tokens.len() - 1;
            let delta = rng.range_usize(cfg.retrieval_distance.0, cfg.retrieval_distance.1);
            let due = value_pos + delta;
            // The recall needs room for "R X" before the end.
            if due + 1 < t {
                pending = Some((due, value));
            }
            block.clear();
            continue;
        }
        if block.is_empty() {
            let len = rng.range_usize(cfg.block_len.0, cfg.block_len.1);
            block = (0..len).map(|i| if i % 2 == 0 { a } else { b }).collect();
            block.reverse(); // consumed from the back
        }
        tokens.push(block.pop().expect("block refilled above"));
    }
    tokens.truncate(t);
    let impossible = vec![false; t];
    Ok(SequenceSample::finish(tokens, needs, impossible, seed))
}

/// Generate one NeedleHaystack sequence.
pub fn gen_needle_haystack(cfg: &TaskConfig, seed: u64) -> Result<SequenceSample> {
    if cfg.kind != TaskKind::NeedleHaystack {
        return Err(AmorError::TaskConfig(
            "config is not a NeedleHaystack config".into(),
        ));
    }
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let t = cfg.seq_len;
    let mut tokens: Vec<usize> = Vec::with_capacity(t);
    let mut needs = vec![false; t];
    let mut impossible = vec![false; t];

    // Store phase: distinct keys, arbitrary values.
    let n_pairs = rng.range_usize(cfg.n_pairs.0, cfg.n_pairs.1);
    let mut keys: Vec<usize> = Vec::with_capacity(n_pairs);
    while keys.len() < n_pairs {
        let k = rng.range_usize(0, cfg.content_vocab - 1);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let values: Vec<usize> = (0..n_pairs)
        .map(|_| rng.range_usize(0, cfg.content_vocab - 1))
        .collect();
    for (&k, &v) in keys.iter().zip(&values) {
        tokens.push(cfg.tok_mark()); // STORE
        tokens.push(k);
        tokens.push(v);
    }

    // Noise phase: uniform content tokens only.
    let noise_len = rng.range_usize(cfg.noise_len.0, cfg.noise_len.1);
    for _ in 0..noise_len {
        tokens.push(rng.range_usize(0, cfg.content_vocab - 1));
    }

    // Query phase.
    let n_queries = rng.range_usize(cfg.n_queries.0, cfg.n_queries.1);
    let unused: Vec<usize> = (0..cfg.content_vocab).filter(|k| !keys.contains(k)).collect();
    for _ in 0..n_queries {
        let key_pos = tokens.len() + 1;
        tokens.push(cfg.tok_recall()); // QUERY
        if cfg.impossible_prob > 0.0 && rng.chance(cfg.impossible_prob) {
            let k = unused[rng.range_usize(0, unused.len() - 1)];
            tokens.push(k);
            tokens.push(cfg.tok_placeholder());
            impossible[key_pos] = true;
        } else {
            let idx = rng.range_usize(0, n_pairs - 1);
            tokens.push(keys[idx]);
            tokens.push(values[idx]);
            needs[key_pos] = true;
        }
    }

    // Right-pad with noise-distribution tokens.
    while tokens.len() < t {
        tokens.push(rng.range_usize(0, cfg.content_vocab - 1));
    }
    Ok(SequenceSample::finish(tokens, needs, impossible, seed))
}

/// Generate one sample of whichever task the config describes.
pub fn gen_sample(cfg: &TaskConfig, seed: u64) -> Result<SequenceSample> {
    match cfg.kind {
        TaskKind::SimpleRetrieval => gen_simple_retrieval(cfg, seed),
        TaskKind::NeedleHaystack => gen_needle_haystack(cfg, seed),
    }
}

/// Generate samples `start..start + count` of the batch stream rooted at
/// `seed`. Sample `i` always uses `derive_seed(seed, i)`, so chunking a
/// stream into batches never changes its contents.
pub fn make_batch_range(
    cfg: &TaskConfig,
    seed: u64,
    start: usize,
    count: usize,
) -> Result<Vec<SequenceSample>> {
    (start..start + count)
        .map(|i| gen_sample(cfg, derive_seed(seed, i as u64)))
        .collect()
}

/// First `batch_size` samples of the stream rooted at `seed`.
pub fn make_batch(cfg: &TaskConfig, seed: u64, batch_size: usize) -> Result<Vec<SequenceSample>> {
    if batch_size == 0 {
        return Err(AmorError::TaskConfig("batch_size must be >= 1".into()));
    }
    make_batch_range(cfg, seed, 0, batch_size)
}

/// Write samples as JSON lines for external inspection.
pub fn dump_samples<W: Write>(
    cfg: &TaskConfig,
    seed: u64,
    count: usize,
    out: &mut W,
) -> Result<()> {
    for sample in make_batch_range(cfg, seed, 0, count)? {
        serde_json::to_writer(&mut *out, &sample)?;
        writeln!(out)?;
    }
    Ok(())
}
