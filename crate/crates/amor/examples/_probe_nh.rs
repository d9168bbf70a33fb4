use amor::metrics::EvalOptions;
use amor::model::{AmorModel, GateMode, ModelConfig, SequenceModel};
use amor::rng::Rng;
use amor::tasks::{make_batch, TaskConfig};
use amor::tensor::Tape;
use amor::train::{train, TrainConfig};

fn main() {
    let task = TaskConfig::needle_haystack();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let tc = TrainConfig { epochs, batches_per_epoch: 100, ..TrainConfig::default() };
    let cfg = ModelConfig {
        gate_mode: GateMode::Oracle,
        max_seq_len: task.seq_len,
        ..ModelConfig::base(task.vocab_size())
    };
    let mut model = AmorModel::new(cfg.clone(), 42).unwrap();
    let _ = train(&mut model, &task, &tc, 42, EvalOptions::default()).unwrap();

    // Probe on a fresh batch.
    let batch = make_batch(&task, 777, 8).unwrap();
    let b = batch.len();
    let t = batch[0].tokens.len();
    let d = cfg.d_model;
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &batch, false, &mut Rng::new(0)).unwrap();
    let hidden = tape.data(pass.hidden.unwrap()).to_vec();

    // Trained projections.
    let by_name = |name: &str| {
        let p = model.param_set().params.iter().find(|p| p.name == name).unwrap();
        (p.data.clone(), p.shape.clone())
    };
    let (wq, _) = by_name("attn.w_q");
    let (wk, _) = by_name("attn.w_k");
    let matvec = |w: &[f64], h: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                out[j] += h[i] * w[i * d + j];
            }
        }
        out
    };

    let mut rank_sum = 0usize;
    let mut top3 = 0usize;
    let mut n_queries = 0usize;
    let mut cos_correct = 0.0;
    let mut cos_noise = 0.0;
    let dot = |a: &[f64], bb: &[f64]| -> f64 { a.iter().zip(bb).map(|(x, y)| x * y).sum() };
    let norm = |a: &[f64]| -> f64 { dot(a, a).sqrt() };

    for (bb, sample) in batch.iter().enumerate() {
        // store map: key -> value position
        let mut store_pos = std::collections::HashMap::new();
        let toks = &sample.tokens;
        let mut i = 0;
        while i < toks.len() {
            if toks[i] == task.tok_mark() {
                store_pos.insert(toks[i + 1], i + 2);
                i += 3;
            } else {
                i += 1;
            }
        }
        for tt in 0..t {
            if !sample.needs_retrieval[tt] {
                continue;
            }
            let key = toks[tt];
            let correct = store_pos[&key];
            let h_q = &hidden[(tt * b + bb) * d..(tt * b + bb) * d + d];
            let q = matvec(&wq, h_q);
            // score over strictly past positions (all heads together)
            let mut scores: Vec<(f64, usize)> = (0..tt)
                .map(|tp| {
                    let h_k = &hidden[(tp * b + bb) * d..(tp * b + bb) * d + d];
                    let k = matvec(&wk, h_k);
                    (dot(&q, &k), tp)
                })
                .collect();
            scores.sort_by(|a, c| c.0.partial_cmp(&a.0).unwrap());
            let rank = scores.iter().position(|&(_, p)| p == correct).unwrap();
            rank_sum += rank;
            top3 += (rank < 3) as usize;
            n_queries += 1;

            let h_c = &hidden[(correct * b + bb) * d..(correct * b + bb) * d + d];
            cos_correct += dot(h_q, h_c) / (norm(h_q) * norm(h_c));
            let noise_p = tt.saturating_sub(20);
            let h_n = &hidden[(noise_p * b + bb) * d..(noise_p * b + bb) * d + d];
            cos_noise += dot(h_q, h_n) / (norm(h_q) * norm(h_n));
        }
    }
    println!(
        "queries {n_queries}: mean score-rank of correct store {:.1} (of ~150), top3 hit {:.2}%",
        rank_sum as f64 / n_queries as f64,
        100.0 * top3 as f64 / n_queries as f64
    );
    println!(
        "state cosine: query vs correct store {:.3}, query vs noise {:.3}",
        cos_correct / n_queries as f64,
        cos_noise / n_queries as f64
    );
}
