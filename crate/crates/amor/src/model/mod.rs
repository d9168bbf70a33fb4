//! The gated hybrid model and its comparison baselines.
//!
//! Three architectures share this module's parameter store and forward
//! interface:
//!
//! - [`AmorModel`] — GRU backbone, entropy gate, sparse top-k attention
//!   over keys/values projected from either the hidden states ("ghost"
//!   cache) or the raw embeddings, plus a learned combiner.
//! - [`SsmOnlyModel`] — the backbone alone with its output projection.
//! - [`TransformerModel`] — a standard pre-norm causal transformer.

pub mod amor;
pub mod attention;
pub mod gru;
pub mod transformer;

pub use amor::{AmorModel, SsmOnlyModel};
pub use transformer::TransformerModel;

use serde::{Deserialize, Serialize};

use crate::error::{AmorError, Result};
use crate::rng::Rng;
use crate::tasks::SequenceSample;
use crate::tensor::{Tape, TensorId};

/// How the gate decides which positions receive attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// Threshold on normalized prediction entropy with learnable tau/alpha.
    Entropy,
    /// Ground-truth needs_retrieval labels; no gradient, no balance loss.
    Oracle,
    /// Learned linear probe on the hidden state, thresholded with the
    /// straight-through estimator.
    LearnedSte,
    AlwaysOn,
    AlwaysOff,
    /// Diagnostic: the entropy gate's soft probability used directly as
    /// the mask, with no threshold. Fully differentiable, so the whole
    /// gate path is finite-difference checkable; not used in experiments.
    SoftEntropy,
}

/// Where attention keys and values are projected from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KvSource {
    /// Projections of the recurrent hidden states.
    GhostSsm,
    /// Projections of the raw token embeddings.
    RawEmbedding,
}

/// Architecture hyperparameters (shared by all three model kinds; the
/// transformer ignores the gate fields and the gated model ignores
/// `ff_mult`/`max_seq_len`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_ssm_layers: usize,
    pub n_heads: usize,
    pub top_k: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub gate_mode: GateMode,
    pub kv_source: KvSource,
    pub tau_init: f64,
    pub alpha_init: f64,
    /// Cut the gradient from the gate's entropy into the SSM logits
    /// (ablation switch; off by default).
    pub detach_gate_input: bool,
    /// Feed-forward width multiple for the transformer baseline.
    pub ff_mult: usize,
    /// Positional-embedding capacity for the transformer baseline.
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_ssm_layers: 2,
            n_heads: 4,
            top_k: 3,
            dropout: 0.1,
            vocab_size,
            gate_mode: GateMode::Entropy,
            kv_source: KvSource::GhostSsm,
            tau_init: 0.5,
            alpha_init: 10.0,
            detach_gate_input: false,
            ff_mult: 8,
            max_seq_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(AmorError::InvalidArgument {
                op: "ModelConfig",
                msg: format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        if self.top_k == 0 {
            return Err(AmorError::InvalidArgument {
                op: "ModelConfig",
                msg: "top_k must be >= 1".into(),
            });
        }
        if self.vocab_size < 2 {
            return Err(AmorError::InvalidArgument {
                op: "ModelConfig",
                msg: "vocab_size must be >= 2".into(),
            });
        }
        Ok(())
    }
}

/// One named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Index into a [`ParamSet`].
pub type ParamId = usize;

/// Ordered store of every learnable array in a model. Construction order
/// is the contract: optimizer state, gradients and checkpoints all align
/// by index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, data: Vec<f64>, shape: Vec<usize>) -> ParamId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.params.push(Param {
            name: name.into(),
            data,
            shape,
        });
        self.params.len() - 1
    }

    /// Matrix with entries uniform in ±1/sqrt(fan_in).
    pub fn add_matrix(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let scale = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.uniform_symmetric(scale))
            .collect();
        self.add(name, data, vec![rows, cols])
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, vec![0.0; n], shape)
    }

    /// Embedding table with unit-normal entries. Strong token signals are
    /// load-bearing: they imprint content into the recurrent state even
    /// where the prediction objective alone would not, which is what makes
    /// the projected KV cache separable by content.
    pub fn add_embedding(
        &mut self,
        name: impl Into<String>,
        vocab: usize,
        d: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let data = (0..vocab * d).map(|_| rng.normal()).collect();
        self.add(name, data, vec![vocab, d])
    }

    pub fn add_scalar(&mut self, name: impl Into<String>, value: f64) -> ParamId {
        self.add(name, vec![value], vec![1])
    }

    /// Total scalar count across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Load every parameter onto a tape as a gradient-tracked leaf,
    /// returning ids aligned with parameter order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), p.shape.clone(), true))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Per-position gate diagnostics extracted from a forward pass, one entry
/// per row (time-major `t*batch + b`).
#[derive(Clone, Debug, Default)]
pub struct GateTrace {
    /// Shannon entropy of the gate's probability source, in nats.
    pub raw_entropy: Vec<f64>,
    /// Entropy divided by log |V|, in [0, 1].
    pub normalized_entropy: Vec<f64>,
    /// Soft gate probability, when the gate has one.
    pub soft: Option<Vec<f64>>,
    /// Hard 0/1 decision, when the model has a gate at all.
    pub hard: Option<Vec<f64>>,
}

/// Everything a forward pass exposes to the loss, metrics and tests.
pub struct ForwardPass {
    /// Final logits, `[T*B, vocab]`, rows time-major (`t*B + b`).
    pub logits: TensorId,
    /// Tape leaves aligned with the model's [`ParamSet`] order.
    pub leaves: Vec<TensorId>,
    /// Mean soft gate probability (input to the balance loss); absent for
    /// constant gates and gateless models.
    pub soft_gate_mean: Option<TensorId>,
    pub trace: GateTrace,
    /// Backbone prediction logits, when distinct from `logits`.
    pub ssm_logits: Option<TensorId>,
    /// Logits that receive an auxiliary cross-entropy term. The gated
    /// model sets this to its backbone head: the gate reads prediction
    /// entropy from `ssm_logits`, which is only a calibrated uncertainty
    /// signal if that head is itself trained to predict.
    pub aux_ce_logits: Option<TensorId>,
    /// Top-layer hidden states.
    pub hidden: Option<TensorId>,
    /// Gated attention output.
    pub attn_out: Option<TensorId>,
}

/// Common forward interface used by training, evaluation and experiments.
pub trait SequenceModel {
    fn forward(
        &self,
        tape: &mut Tape,
        batch: &[SequenceSample],
        train: bool,
        rng: &mut Rng,
    ) -> Result<ForwardPass>;

    fn param_set(&self) -> &ParamSet;
    fn param_set_mut(&mut self) -> &mut ParamSet;
    fn vocab_size(&self) -> usize;
    fn kind(&self) -> &'static str;
}

/// Flatten a batch to time-major token rows: row `t*B + b` holds sequence
/// `b` at position `t`.
pub(crate) fn time_major_tokens(batch: &[SequenceSample]) -> (Vec<usize>, usize, usize) {
    let b = batch.len();
    let t = batch[0].tokens.len();
    debug_assert!(batch.iter().all(|s| s.tokens.len() == t));
    let mut ids = vec![0usize; t * b];
    for (bb, sample) in batch.iter().enumerate() {
        for (tt, &tok) in sample.tokens.iter().enumerate() {
            ids[tt * b + bb] = tok;
        }
    }
    (ids, t, b)
}

/// Targets and loss mask in the same time-major layout.
pub(crate) fn time_major_targets(batch: &[SequenceSample]) -> (Vec<usize>, Vec<bool>) {
    let b = batch.len();
    let t = batch[0].tokens.len();
    let mut targets = vec![0usize; t * b];
    let mut mask = vec![false; t * b];
    for (bb, sample) in batch.iter().enumerate() {
        let sample_mask = sample.loss_mask();
        for tt in 0..t {
            targets[tt * b + bb] = sample.targets[tt];
            mask[tt * b + bb] = sample_mask[tt];
        }
    }
    (targets, mask)
}

/// Finite-difference check of a model's training loss against its analytic
/// gradients, perturbing every parameter element (central differences,
/// step [`crate::tensor::check::FD_STEP`]).
///
/// Relative error uses a near-zero floor of `1e-6`: with a loss of
/// magnitude ~`ln |V|`, f64 central differences carry ~1e-11 of
/// cancellation noise, which would swamp the per-op `1e-8` floor for
/// parameters whose true gradient is ~zero.
pub fn fd_check_loss<M: SequenceModel>(
    model: &mut M,
    batch: &[SequenceSample],
    train_cfg: &crate::train::TrainConfig,
) -> Result<f64> {
    let (targets, mask) = time_major_targets(batch);
    let eval_loss = |model: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, batch, false, &mut Rng::new(0))?;
        let loss = crate::train::composite_loss(
            &mut tape,
            pass.logits,
            pass.aux_ce_logits,
            &targets,
            &mask,
            pass.soft_gate_mean,
            train_cfg,
        )?;
        Ok(tape.value(loss))
    };

    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, batch, false, &mut Rng::new(0))?;
    let loss = crate::train::composite_loss(
        &mut tape,
        pass.logits,
        pass.aux_ce_logits,
        &targets,
        &mask,
        pass.soft_gate_mean,
        train_cfg,
    )?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = pass
        .leaves
        .iter()
        .zip(&model.param_set().params)
        .map(|(&leaf, p)| {
            tape.grad(leaf)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.data.len()])
        })
        .collect();

    let h = crate::tensor::check::FD_STEP;
    let mut max_rel = 0.0f64;
    for pi in 0..model.param_set().params.len() {
        for ei in 0..model.param_set().params[pi].data.len() {
            let orig = model.param_set().params[pi].data[ei];
            model.param_set_mut().params[pi].data[ei] = orig + h;
            let plus = eval_loss(model)?;
            model.param_set_mut().params[pi].data[ei] = orig - h;
            let minus = eval_loss(model)?;
            model.param_set_mut().params[pi].data[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Serialized model snapshot: config + named parameter arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub config: ModelConfig,
    pub params: ParamSet,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(kind: &str, config: &ModelConfig, params: &ParamSet) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            config: config.clone(),
            params: params.clone(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(AmorError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests;
