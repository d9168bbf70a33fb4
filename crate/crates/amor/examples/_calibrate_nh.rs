use std::time::Instant;

use amor::metrics::EvalOptions;
use amor::model::{AmorModel, GateMode, KvSource, ModelConfig, SsmOnlyModel};
use amor::tasks::TaskConfig;
use amor::train::{train, TrainConfig};

fn main() {
    let noise: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut task = TaskConfig::needle_haystack();
    if noise > 0 {
        task.noise_len = (noise, noise);
        task.seq_len = (3 * task.n_pairs.1 + noise + 3 * task.n_queries.1 + 9).div_ceil(16) * 16;
    }
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let which = std::env::args().nth(3).unwrap_or_else(|| "oracle".into());
    let tc = TrainConfig { epochs, batches_per_epoch: steps, ..TrainConfig::default() };
    let base = ModelConfig { max_seq_len: task.seq_len, ..ModelConfig::base(task.vocab_size()) };

    match which.as_str() {
        "always_on" => {
            let t0 = Instant::now();
            let mut m = AmorModel::new(
                ModelConfig { gate_mode: GateMode::AlwaysOn, ..base.clone() }, 42).unwrap();
            let out = train(&mut m, &task, &tc, 42, EvalOptions::default()).unwrap();
            println!("always_on {:.1}s", t0.elapsed().as_secs_f64());
            for r in &out.history {
                println!("  ep{:02} loss {:.4} acc {:.4} racc {:?}",
                    r.epoch, r.loss, r.overall_acc,
                    r.retrieval_acc.map(|v| (v * 1e4).round() / 1e4));
            }
        }
        "oracle" | "raw" => {
            let kv = if which == "raw" { KvSource::RawEmbedding } else { KvSource::GhostSsm };
            let t0 = Instant::now();
            let mut m = AmorModel::new(
                ModelConfig { gate_mode: GateMode::Oracle, kv_source: kv, ..base.clone() }, 42).unwrap();
            let out = train(&mut m, &task, &tc, 42, EvalOptions::default()).unwrap();
            println!("{which} {:.1}s", t0.elapsed().as_secs_f64());
            for r in &out.history {
                println!("  ep{:02} loss {:.4} acc {:.4} racc {:?} rate {:?}",
                    r.epoch, r.loss, r.overall_acc,
                    r.retrieval_acc.map(|v| (v * 1e4).round() / 1e4),
                    r.gate_rate.map(|v| (v * 1e3).round() / 1e3));
            }
        }
        "entropy" => {
            let t0 = Instant::now();
            let mut m = AmorModel::new(ModelConfig { gate_mode: GateMode::Entropy, ..base.clone() }, 42).unwrap();
            let out = train(&mut m, &task, &tc, 42, EvalOptions::default()).unwrap();
            println!("entropy {:.1}s", t0.elapsed().as_secs_f64());
            for r in &out.history {
                println!("  ep{:02} loss {:.4} acc {:.4} racc {:?} rate {:?} gap {:?}",
                    r.epoch, r.loss, r.overall_acc,
                    r.retrieval_acc.map(|v| (v * 1e4).round() / 1e4),
                    r.gate_rate.map(|v| (v * 1e3).round() / 1e3),
                    r.entropy_gap.map(|v| (v * 1e4).round() / 1e4));
            }
        }
        "ssm" => {
            let t0 = Instant::now();
            let mut m = SsmOnlyModel::new(base.clone(), 42).unwrap();
            let out = train(&mut m, &task, &tc, 42, EvalOptions::default()).unwrap();
            println!("ssm {:.1}s", t0.elapsed().as_secs_f64());
            for r in &out.history {
                println!("  ep{:02} loss {:.4} acc {:.4} racc {:?}",
                    r.epoch, r.loss, r.overall_acc,
                    r.retrieval_acc.map(|v| (v * 1e4).round() / 1e4));
            }
        }
        _ => eprintln!("unknown mode"),
    }
}
