use std::time::Instant;

use amor::metrics::EvalOptions;
use amor::model::{AmorModel, GateMode, ModelConfig, SsmOnlyModel};
use amor::tasks::TaskConfig;
use amor::train::{train, TrainConfig};

fn main() {
    let task = TaskConfig::simple_retrieval();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let which = std::env::args().nth(3).unwrap_or_else(|| "both".into());
    let tc = TrainConfig { epochs, batches_per_epoch: steps, ..TrainConfig::default() };

    if which == "ssm" || which == "both" {
        let t0 = Instant::now();
        let mut ssm = SsmOnlyModel::new(ModelConfig::base(task.vocab_size()), 42).unwrap();
        let out = train(&mut ssm, &task, &tc, 42, EvalOptions::default()).unwrap();
        println!("ssm {:.1}s", t0.elapsed().as_secs_f64());
        for r in &out.history {
            println!(
                "  ep{:02} loss {:.4} acc {:.4} racc {:?} gap {:?}",
                r.epoch, r.loss, r.overall_acc,
                r.retrieval_acc.map(|v| (v * 1e4).round() / 1e4),
                r.entropy_gap.map(|v| (v * 1e4).round() / 1e4)
            );
        }
    }
    if which == "oracle" {
        let t0 = Instant::now();
        let mut amor = AmorModel::new(
            ModelConfig { gate_mode: GateMode::Oracle, ..ModelConfig::base(task.vocab_size()) },
            42,
        )
        .unwrap();
        let out = train(&mut amor, &task, &tc, 42, EvalOptions::default()).unwrap();
        println!("oracle {:.1}s", t0.elapsed().as_secs_f64());
        for r in &out.history {
            println!(
                "  ep{:02} loss {:.4} acc {:.4} racc {:?} rate {:?}",
                r.epoch, r.loss, r.overall_acc,
                r.retrieval_acc.map(|v| (v * 1e4).round() / 1e4),
                r.gate_rate.map(|v| (v * 1e3).round() / 1e3),
            );
        }
        let m = &out.final_metrics;
        println!("final: racc {:?} recall {:?} rate {:?}", m.retrieval_acc, m.gate_recall, m.gate_rate);
    }
    if which == "amor" || which == "both" {
        let t0 = Instant::now();
        let mut amor = AmorModel::new(
            ModelConfig { gate_mode: GateMode::Entropy, ..ModelConfig::base(task.vocab_size()) },
            42,
        )
        .unwrap();
        let out = train(&mut amor, &task, &tc, 42, EvalOptions::default()).unwrap();
        println!("amor {:.1}s", t0.elapsed().as_secs_f64());
        for r in &out.history {
            println!(
                "  ep{:02} loss {:.4} acc {:.4} racc {:?} rate {:?} f1 {:?} gap {:?} tau {:?}",
                r.epoch, r.loss, r.overall_acc,
                r.retrieval_acc.map(|v| (v * 1e4).round() / 1e4),
                r.gate_rate.map(|v| (v * 1e3).round() / 1e3),
                r.gate_f1.map(|v| (v * 1e3).round() / 1e3),
                r.entropy_gap.map(|v| (v * 1e4).round() / 1e4),
                r.tau.map(|v| (v * 1e3).round() / 1e3)
            );
        }
        let m = &out.final_metrics;
        println!("final: racc {:?} recall {:?} rate {:?}", m.retrieval_acc, m.gate_recall, m.gate_rate);
    }
}
