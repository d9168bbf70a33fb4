//! Evaluation quantities: accuracies, gate confusion statistics, entropy
//! means and the entropy gap, plus histogram data for external plotting.
//!
//! Every rate is computed over loss-masked positions (the final position
//! of each sequence has no target and is excluded). Retrieval accuracy
//! covers `needs_retrieval` positions; impossible queries are reported
//! separately and only fold into retrieval accuracy when
//! [`EvalOptions::include_impossible`] is set.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{AmorError, Result};
use crate::model::{ForwardPass, SequenceModel};
use crate::rng::Rng;
use crate::tasks::SequenceSample;
use crate::tensor::Tape;

/// Evaluation switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// Count impossible-query positions inside retrieval accuracy
    /// (horizon-sweep replication); off by default.
    pub include_impossible: bool,
}

/// Aggregated evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub overall_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub impossible_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_f1: Option<f64>,
    /// Mean prediction entropy at retrieval positions, in nats.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_mean_retrieval: Option<f64>,
    /// Mean prediction entropy at local positions, in nats.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_mean_local: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_gap: Option<f64>,
    pub n_positions: usize,
    pub n_retrieval: usize,
    pub n_local: usize,
    pub n_impossible: usize,
}

/// Argmax with lowest-index tie-break.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[derive(Default)]
struct Tally {
    positions: usize,
    correct: usize,
    needs: usize,
    retrieval: usize,
    retrieval_correct: usize,
    impossible: usize,
    impossible_correct: usize,
    local: usize,
    gate_present: bool,
    gate_on: usize,
    tp: usize,
    fp: usize,
    fn_: usize,
    entropy_retrieval_sum: f64,
    entropy_local_sum: f64,
}

fn tally_batch(
    tally: &mut Tally,
    pass: &ForwardPass,
    logits: &[f64],
    vocab: usize,
    batch: &[SequenceSample],
    opts: EvalOptions,
) {
    let b = batch.len();
    let t = batch[0].tokens.len();
    let hard = pass.trace.hard.as_deref();
    if hard.is_some() {
        tally.gate_present = true;
    }
    for (bb, sample) in batch.iter().enumerate() {
        for tt in 0..t - 1 {
            let row = tt * b + bb;
            let pred = argmax(&logits[row * vocab..(row + 1) * vocab]);
            let hit = pred == sample.targets[tt];
            let needs = sample.needs_retrieval[tt];
            let imp = sample.impossible[tt];

            tally.positions += 1;
            tally.correct += hit as usize;
            if needs || (opts.include_impossible && imp) {
                tally.retrieval += 1;
                tally.retrieval_correct += hit as usize;
            }
            if imp {
                tally.impossible += 1;
                tally.impossible_correct += hit as usize;
            }
            let entropy = pass.trace.raw_entropy[row];
            if needs {
                tally.needs += 1;
                tally.entropy_retrieval_sum += entropy;
            } else if !imp {
                tally.local += 1;
                tally.entropy_local_sum += entropy;
            }
            if let Some(h) = hard {
                let on = h[row] > 0.5;
                tally.gate_on += on as usize;
                match (on, needs) {
                    (true, true) => tally.tp += 1,
                    (true, false) => tally.fp += 1,
                    (false, true) => tally.fn_ += 1,
                    (false, false) => {}
                }
            }
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

impl Tally {
    fn finish(self) -> MetricsRecord {
        let entropy_mean_retrieval = if self.needs > 0 {
            Some(self.entropy_retrieval_sum / self.needs as f64)
        } else {
            None
        };
        let entropy_mean_local = if self.local > 0 {
            Some(self.entropy_local_sum / self.local as f64)
        } else {
            None
        };
        let entropy_gap = match (entropy_mean_retrieval, entropy_mean_local) {
            (Some(r), Some(l)) => Some(r - l),
            _ => None,
        };
        let (gate_rate, gate_precision, gate_recall, gate_f1) = if self.gate_present {
            let rate = ratio(self.gate_on, self.positions);
            let precision = ratio(self.tp, self.tp + self.fp);
            let recall = ratio(self.tp, self.tp + self.fn_);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            (rate, precision, recall, f1)
        } else {
            (None, None, None, None)
        };

        MetricsRecord {
            overall_acc: self.correct as f64 / self.positions.max(1) as f64,
            retrieval_acc: ratio(self.retrieval_correct, self.retrieval),
            impossible_acc: ratio(self.impossible_correct, self.impossible),
            gate_rate,
            gate_precision,
            gate_recall,
            gate_f1,
            entropy_mean_retrieval,
            entropy_mean_local,
            entropy_gap,
            n_positions: self.positions,
            n_retrieval: self.retrieval,
            n_local: self.local,
            n_impossible: self.impossible,
        }
    }
}

/// Evaluate a model over pre-generated batches (dropout disabled).
pub fn evaluate<M: SequenceModel>(
    model: &M,
    batches: &[Vec<SequenceSample>],
    opts: EvalOptions,
) -> Result<MetricsRecord> {
    let vocab = model.vocab_size();
    let mut tally = Tally::default();
    let mut rng = Rng::new(0); // unused: eval runs without dropout
    for batch in batches {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, false, &mut rng)?;
        let logits = tape.data(pass.logits);
        tally_batch(&mut tally, &pass, logits, vocab, batch, opts);
    }
    if tally.positions == 0 {
        return Err(AmorError::InvalidArgument {
            op: "evaluate",
            msg: "no positions to evaluate".into(),
        });
    }
    Ok(tally.finish())
}

/// Binned distribution of normalized entropy, split by position category.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyHistogram {
    pub n_bins: usize,
    /// Counts over [0, 1] for local (non-retrieval, non-impossible)
    /// positions.
    pub count_local: Vec<u64>,
    /// Counts for needs_retrieval positions.
    pub count_retrieval: Vec<u64>,
}

impl EntropyHistogram {
    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = 1.0 / self.n_bins as f64;
        (i as f64 * w, (i + 1) as f64 * w)
    }

    /// Mean normalized entropy per category recomputed from bin centers.
    pub fn approx_means(&self) -> (Option<f64>, Option<f64>) {
        let mean = |counts: &[u64]| {
            let total: u64 = counts.iter().sum();
            if total == 0 {
                return None;
            }
            let w = 1.0 / self.n_bins as f64;
            let s: f64 = counts
                .iter()
                .enumerate()
                .map(|(i, &c)| c as f64 * ((i as f64 + 0.5) * w))
                .sum();
            Some(s / total as f64)
        };
        (mean(&self.count_local), mean(&self.count_retrieval))
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "bin_lo,bin_hi,count_local,count_retrieval")?;
        for i in 0..self.n_bins {
            let (lo, hi) = self.bin_edges(i);
            writeln!(
                out,
                "{lo},{hi},{},{}",
                self.count_local[i], self.count_retrieval[i]
            )?;
        }
        Ok(())
    }
}

/// Histogram of normalized prediction entropy at local vs retrieval
/// positions.
pub fn entropy_histogram<M: SequenceModel>(
    model: &M,
    batches: &[Vec<SequenceSample>],
    n_bins: usize,
) -> Result<EntropyHistogram> {
    if n_bins < 2 {
        return Err(AmorError::InvalidArgument {
            op: "entropy_histogram",
            msg: format!("n_bins = {n_bins} < 2"),
        });
    }
    let mut hist = EntropyHistogram {
        n_bins,
        count_local: vec![0; n_bins],
        count_retrieval: vec![0; n_bins],
    };
    let mut rng = Rng::new(0);
    for batch in batches {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, false, &mut rng)?;
        let b = batch.len();
        let t = batch[0].tokens.len();
        for (bb, sample) in batch.iter().enumerate() {
            for tt in 0..t - 1 {
                let row = tt * b + bb;
                let h = pass.trace.normalized_entropy[row];
                let bin = ((h * n_bins as f64) as usize).min(n_bins - 1);
                if sample.needs_retrieval[tt] {
                    hist.count_retrieval[bin] += 1;
                } else if !sample.impossible[tt] {
                    hist.count_local[bin] += 1;
                }
            }
        }
    }
    Ok(hist)
}
