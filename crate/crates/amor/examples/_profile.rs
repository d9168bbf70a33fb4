use std::time::Instant;

use amor::model::{AmorModel, GateMode, ModelConfig, SequenceModel, SsmOnlyModel};
use amor::rng::Rng;
use amor::tasks::{make_batch, TaskConfig};
use amor::tensor::Tape;
use amor::train::{composite_loss, TrainConfig};

fn targets_mask(batch: &[amor::tasks::SequenceSample]) -> (Vec<usize>, Vec<bool>) {
    let b = batch.len();
    let t = batch[0].tokens.len();
    let mut tg = vec![0usize; t * b];
    let mut mk = vec![false; t * b];
    for (bb, s) in batch.iter().enumerate() {
        let m = s.loss_mask();
        for tt in 0..t {
            tg[tt * b + bb] = s.targets[tt];
            mk[tt * b + bb] = m[tt];
        }
    }
    (tg, mk)
}

fn main() {
    let task = TaskConfig::simple_retrieval();
    let batch = make_batch(&task, 42, 32).unwrap();
    let (tg, mk) = targets_mask(&batch);
    let tc = TrainConfig::default();
    let mut rng = Rng::new(1);
    let reps = 10;

    let ssm = SsmOnlyModel::new(ModelConfig::base(11), 42).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let _ = ssm.forward(&mut tape, &batch, true, &mut rng).unwrap();
    }
    println!("ssm fwd:      {:.1}ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let p = ssm.forward(&mut tape, &batch, true, &mut rng).unwrap();
        let loss = composite_loss(&mut tape, p.logits, p.aux_ce_logits, &tg, &mk, p.soft_gate_mean, &tc).unwrap();
        tape.backward(loss).unwrap();
    }
    println!("ssm fwd+bwd:  {:.1}ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let amor = AmorModel::new(
        ModelConfig { gate_mode: GateMode::Entropy, ..ModelConfig::base(11) },
        42,
    )
    .unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let p = amor.forward(&mut tape, &batch, true, &mut rng).unwrap();
        let loss = composite_loss(&mut tape, p.logits, p.aux_ce_logits, &tg, &mk, p.soft_gate_mean, &tc).unwrap();
        tape.backward(loss).unwrap();
    }
    println!("amor fwd+bwd: {:.1}ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let tf = amor::model::TransformerModel::new(
        ModelConfig { max_seq_len: 128, ..ModelConfig::base(11) },
        42,
    )
    .unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let p = tf.forward(&mut tape, &batch, true, &mut rng).unwrap();
        let loss = composite_loss(&mut tape, p.logits, p.aux_ce_logits, &tg, &mk, p.soft_gate_mean, &tc).unwrap();
        tape.backward(loss).unwrap();
    }
    println!("tf fwd+bwd:   {:.1}ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let _ = tf.forward(&mut tape, &batch, false, &mut rng).unwrap();
    }
    println!("tf fwd eval:  {:.1}ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let _ = tf.forward(&mut tape, &batch, true, &mut rng).unwrap();
    }
    println!("tf fwd train: {:.1}ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

// quick second entry: tf forward only, eval vs train
