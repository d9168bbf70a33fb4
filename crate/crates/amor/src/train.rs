//! End-to-end optimization: composite loss, AdamW with decoupled weight
//! decay, global-norm gradient clipping, and the seeded epoch loop.
//!
//! Seed discipline: a run seed branches into independent streams — batch
//! data (per step), dropout, and the held-out evaluation set — via
//! [`derive_seed`], so histories are bit-identical across re-runs and the
//! eval set never overlaps the training stream.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{AmorError, Result};
use crate::metrics::{evaluate, EvalOptions, MetricsRecord};
use crate::model::{time_major_targets, SequenceModel};
use crate::rng::{derive_seed, Rng};
use crate::tasks::{make_batch, SequenceSample, TaskConfig};
use crate::tensor::{Tape, TensorId};

/// Seed-stream branch tags.
const BRANCH_DATA: u64 = 1;
const BRANCH_DROPOUT: u64 = 2;
const BRANCH_EVAL: u64 = 3;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Balance-loss weight (lambda).
    pub balance_weight: f64,
    /// Target mean gate rate.
    pub target_rate: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Held-out sequences evaluated after every epoch.
    pub eval_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 32,
            epochs: 20,
            batches_per_epoch: 100,
            balance_weight: 0.1,
            target_rate: 0.2,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            eval_sequences: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip", self.grad_clip),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if v <= 0.0 || !v.is_finite() {
                return Err(AmorError::InvalidArgument {
                    op: "TrainConfig",
                    msg: format!("{name} must be positive, got {v}"),
                });
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(AmorError::InvalidArgument {
                op: "TrainConfig",
                msg: "epochs, batch_size and batches_per_epoch must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Cross-entropy over masked positions plus the gate balance penalty
/// `lambda * (mean_soft_gate - target_rate)^2`. The penalty only applies
/// when the model exposes a differentiable gate mean.
///
/// `aux_ce_logits` (the gated model's backbone head) receives its own
/// cross-entropy term over the same targets: the gate thresholds that
/// head's prediction entropy, which only measures uncertainty if the head
/// is trained to predict.
pub fn composite_loss(
    tape: &mut Tape,
    logits: TensorId,
    aux_ce_logits: Option<TensorId>,
    targets: &[usize],
    mask: &[bool],
    soft_gate_mean: Option<TensorId>,
    cfg: &TrainConfig,
) -> Result<TensorId> {
    let mut loss = tape.cross_entropy(logits, targets, mask)?;
    if let Some(aux) = aux_ce_logits {
        let aux_ce = tape.cross_entropy(aux, targets, mask)?;
        loss = tape.add(loss, aux_ce)?;
    }
    if let Some(mean) = soft_gate_mean {
        if cfg.balance_weight > 0.0 {
            let target = tape.scalar(cfg.target_rate);
            let diff = tape.sub(mean, target)?;
            let sq = tape.mul(diff, diff)?;
            let penalty = tape.scale(sq, cfg.balance_weight);
            loss = tape.add(loss, penalty)?;
        }
    }
    Ok(loss)
}

/// Scale gradients in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// AdamW moment buffers.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl OptimState {
    pub fn new(params: &crate::model::ParamSet) -> Self {
        let m = params.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let v = params.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        OptimState { m, v, step: 0 }
    }
}

/// One AdamW update: decoupled weight decay, bias-corrected moments.
/// Gradients must already be clipped. Non-finite gradients abort with the
/// offending parameter's name.
pub fn adamw_step(
    params: &mut crate::model::ParamSet,
    grads: &[Vec<f64>],
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (param, grad) in params.params.iter().zip(grads) {
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(AmorError::NanGradient {
                param: param.name.clone(),
                step: state.step,
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for ((param, grad), (m, v)) in params
        .params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..param.data.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let p = &mut param.data[i];
            *p -= cfg.learning_rate * cfg.weight_decay * *p;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One epoch's telemetry (the data behind training-dynamics plots).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub overall_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub seed: u64,
    /// Seconds since the start of the run; excluded from determinism
    /// comparisons.
    pub wallclock: f64,
}

impl EpochRecord {
    /// Equality on everything except wallclock.
    pub fn metrics_eq(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch
            && self.loss == other.loss
            && self.overall_acc == other.overall_acc
            && self.retrieval_acc == other.retrieval_acc
            && self.gate_rate == other.gate_rate
            && self.gate_f1 == other.gate_f1
            && self.entropy_gap == other.entropy_gap
            && self.tau == other.tau
            && self.alpha == other.alpha
            && self.seed == other.seed
    }
}

/// Trained-run output: per-epoch history plus the final held-out metrics.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub history: Vec<EpochRecord>,
    pub final_metrics: MetricsRecord,
}

/// Gate scalars to report in the history, when the model has them.
pub trait GateReport {
    fn gate_scalars(&self) -> Option<(f64, f64)> {
        None
    }
}

impl GateReport for crate::model::AmorModel {
    fn gate_scalars(&self) -> Option<(f64, f64)> {
        Some(self.gate_params())
    }
}

impl GateReport for crate::model::SsmOnlyModel {}
impl GateReport for crate::model::TransformerModel {}

/// Pre-generate the held-out evaluation batches for a run seed.
pub fn eval_batches(
    task: &TaskConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<Vec<SequenceSample>>> {
    let eval_seed = derive_seed(seed, BRANCH_EVAL);
    let mut batches = Vec::new();
    let mut produced = 0;
    while produced < cfg.eval_sequences {
        let n = cfg.batch_size.min(cfg.eval_sequences - produced);
        batches.push(crate::tasks::make_batch_range(task, eval_seed, produced, n)?);
        produced += n;
    }
    Ok(batches)
}

/// Train a model on freshly generated batches (one stream per step), with
/// a fixed held-out eval set scored after every epoch.
pub fn train<M: SequenceModel + GateReport>(
    model: &mut M,
    task: &TaskConfig,
    cfg: &TrainConfig,
    seed: u64,
    eval_opts: EvalOptions,
) -> Result<TrainOutput> {
    cfg.validate()?;
    task.validate()?;
    let start = Instant::now();
    let data_seed = derive_seed(seed, BRANCH_DATA);
    let mut dropout_rng = Rng::new(derive_seed(seed, BRANCH_DROPOUT));
    let held_out = eval_batches(task, cfg, seed)?;
    let mut state = OptimState::new(model.param_set());
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for step in 0..cfg.batches_per_epoch {
            // One fixed dataset per run: an epoch is a pass over the same
            // `batches_per_epoch x batch_size` sequences.
            let batch_seed = derive_seed(data_seed, step as u64);
            let batch = make_batch(task, batch_seed, cfg.batch_size)?;

            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &batch, true, &mut dropout_rng)?;
            let (targets, mask) = time_major_targets(&batch);
            let loss = composite_loss(
                &mut tape,
                pass.logits,
                pass.aux_ce_logits,
                &targets,
                &mask,
                pass.soft_gate_mean,
                cfg,
            )?;
            let loss_val = tape.value(loss);
            if !loss_val.is_finite() {
                return Err(AmorError::Diverged { epoch, step });
            }
            loss_sum += loss_val;
            tape.backward(loss)?;

            let mut grads: Vec<Vec<f64>> = pass
                .leaves
                .iter()
                .zip(&model.param_set().params)
                .map(|(&leaf, p)| {
                    tape.grad(leaf)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; p.data.len()])
                })
                .collect();
            clip_global_norm(&mut grads, cfg.grad_clip);
            adamw_step(model.param_set_mut(), &grads, &mut state, cfg)?;
            debug_assert!(model.param_set().all_finite());
        }

        let metrics = evaluate(model, &held_out, eval_opts)?;
        let (tau, alpha) = match model.gate_scalars() {
            Some((t, a)) => (Some(t), Some(a)),
            None => (None, None),
        };
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / cfg.batches_per_epoch as f64,
            overall_acc: metrics.overall_acc,
            retrieval_acc: metrics.retrieval_acc,
            gate_rate: metrics.gate_rate,
            gate_f1: metrics.gate_f1,
            entropy_gap: metrics.entropy_gap,
            tau,
            alpha,
            seed,
            wallclock: start.elapsed().as_secs_f64(),
        });
    }

    let final_metrics = evaluate(model, &held_out, eval_opts)?;
    Ok(TrainOutput {
        history,
        final_metrics,
    })
}

/// Serialize history as JSON lines.
pub fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}
