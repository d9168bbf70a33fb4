//! Train a small gated model briefly, checkpoint it, reload, and verify
//! the reloaded model reproduces the evaluation metrics.
//!
//!     cargo run --release --example train_and_checkpoint

use amor::metrics::{evaluate, EvalOptions};
use amor::model::{AmorModel, Checkpoint, ModelConfig, SequenceModel};
use amor::tasks::TaskConfig;
use amor::train::{eval_batches, train, TrainConfig};

fn main() -> amor::Result<()> {
    let task = TaskConfig::simple_retrieval();
    let train_cfg = TrainConfig {
        epochs: 2,
        batches_per_epoch: 10,
        ..TrainConfig::default()
    };
    let mut model = AmorModel::new(ModelConfig::base(task.vocab_size()), 42)?;
    let out = train(&mut model, &task, &train_cfg, 42, EvalOptions::default())?;
    println!("trained: overall acc {:.3}", out.final_metrics.overall_acc);

    let path = std::env::temp_dir().join("amor-demo-checkpoint.json");
    Checkpoint::new(model.kind(), &model.cfg, model.param_set()).save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let restored = AmorModel::from_params(loaded.config, loaded.params)?;

    let held_out = eval_batches(&task, &train_cfg, 42)?;
    let again = evaluate(&restored, &held_out, EvalOptions::default())?;
    println!("reloaded: overall acc {:.3}", again.overall_acc);
    assert_eq!(out.final_metrics, again, "checkpoint must round-trip");
    println!("checkpoint round-trip verified at {}", path.display());
    Ok(())
}
