//! The gated hybrid model and the backbone-only baseline.
//!
//! Forward pipeline (time-major rows `t*B + b`):
//!
//! 1. embed tokens, run the GRU stack → hidden states `H`
//! 2. backbone logits `l = H·W_o + b_o`
//! 3. gate signal: normalized entropy of `softmax(l)` (or a learned probe,
//!    or constants, depending on [`GateMode`])
//! 4. sparse top-k attention over K/V projected from `H` (ghost cache) or
//!    from the embeddings, masked row-wise by the hard gate
//! 5. combine: `logits = (W_c [H ‖ attn])·W_out`
//!
//! The hard gate is a straight-through threshold, so gate gradients flow
//! through the soft probability while the forward stays exactly binary.

use crate::error::Result;
use crate::rng::Rng;
use crate::tasks::SequenceSample;
use crate::tensor::Tape;

use super::attention::sparse_topk_attention;
use super::gru::{gru_stack_forward, GruStackIds};
use super::{
    time_major_tokens, ForwardPass, GateMode, GateTrace, ModelConfig, ParamId, ParamSet,
    SequenceModel,
};

struct AmorIds {
    embedding: ParamId,
    gru: GruStackIds,
    w_o: ParamId,
    b_o: ParamId,
    tau: ParamId,
    alpha: ParamId,
    probe_w: Option<ParamId>,
    probe_b: Option<ParamId>,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_c: ParamId,
    b_c: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// The full gated model.
pub struct AmorModel {
    pub cfg: ModelConfig,
    params: ParamSet,
    ids: AmorIds,
}

impl AmorModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let v = cfg.vocab_size;

        let embedding = params.add_embedding("embedding", v, d, &mut rng);
        let gru = GruStackIds::init(&mut params, cfg.n_ssm_layers, d, &mut rng);
        let w_o = params.add_matrix("w_o", d, v, &mut rng);
        let b_o = params.add_zeros("b_o", vec![v]);
        let tau = params.add_scalar("gate.tau", cfg.tau_init);
        let alpha = params.add_scalar("gate.alpha", cfg.alpha_init);
        let (probe_w, probe_b) = if cfg.gate_mode == GateMode::LearnedSte {
            (
                Some(params.add_matrix("gate.probe_w", d, 1, &mut rng)),
                Some(params.add_zeros("gate.probe_b", vec![1])),
            )
        } else {
            (None, None)
        };
        let w_q = params.add_matrix("attn.w_q", d, d, &mut rng);
        let w_k = params.add_matrix("attn.w_k", d, d, &mut rng);
        let w_v = params.add_matrix("attn.w_v", d, d, &mut rng);
        let w_c = params.add_matrix("w_c", 2 * d, d, &mut rng);
        let b_c = params.add_zeros("b_c", vec![d]);
        let w_out = params.add_matrix("w_out", d, v, &mut rng);
        let b_out = params.add_zeros("b_out", vec![v]);

        Ok(AmorModel {
            cfg,
            params,
            ids: AmorIds {
                embedding,
                gru,
                w_o,
                b_o,
                tau,
                alpha,
                probe_w,
                probe_b,
                w_q,
                w_k,
                w_v,
                w_c,
                b_c,
                w_out,
                b_out,
            },
        })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        let fresh = AmorModel::new(cfg, 0)?;
        debug_assert_eq!(fresh.params.params.len(), params.params.len());
        Ok(AmorModel { params, ..fresh })
    }

    /// Gate scalars (tau, alpha) as currently stored.
    pub fn gate_params(&self) -> (f64, f64) {
        (
            self.params.params[self.ids.tau].data[0],
            self.params.params[self.ids.alpha].data[0],
        )
    }
}

impl SequenceModel for AmorModel {
    fn forward(
        &self,
        tape: &mut Tape,
        batch: &[SequenceSample],
        train: bool,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let (ids, t, b) = time_major_tokens(batch);
        let n = t * b;
        let cfg = &self.cfg;
        let leaves = self.params.leaves(tape);
        let p = &self.ids;

        let emb = tape.embedding_lookup(leaves[p.embedding], &ids)?;
        let hidden = gru_stack_forward(
            tape,
            &leaves,
            &p.gru,
            emb,
            t,
            b,
            cfg.dropout,
            train,
            rng,
        )?;

        // Backbone prediction head (shared with the gate's entropy source).
        let ssm_logits = tape.linear(hidden, leaves[p.w_o], leaves[p.b_o])?;

        // Entropy of the backbone's next-token distribution, always traced.
        let gate_src = if cfg.detach_gate_input {
            tape.detach(ssm_logits)
        } else {
            ssm_logits
        };
        let probs = tape.softmax_lastdim(gate_src);
        let raw_entropy = tape.row_entropy(probs);
        let norm_entropy = tape.scale(raw_entropy, 1.0 / (cfg.vocab_size as f64).ln());

        // Gate decision.
        let (soft, hard) = match cfg.gate_mode {
            GateMode::Entropy => {
                let shifted = tape.sub(norm_entropy, leaves[p.tau])?;
                let pre = tape.mul(shifted, leaves[p.alpha])?;
                let soft = tape.sigmoid(pre);
                let hard = tape.ste_threshold(soft, 0.5);
                (Some(soft), hard)
            }
            GateMode::SoftEntropy => {
                let shifted = tape.sub(norm_entropy, leaves[p.tau])?;
                let pre = tape.mul(shifted, leaves[p.alpha])?;
                let soft = tape.sigmoid(pre);
                (Some(soft), soft)
            }
            GateMode::LearnedSte => {
                let pw = p.probe_w.expect("probe registered for LearnedSte");
                let pb = p.probe_b.expect("probe registered for LearnedSte");
                let pre = tape.linear(hidden, leaves[pw], leaves[pb])?;
                let soft = tape.sigmoid(pre);
                let hard = tape.ste_threshold(soft, 0.5);
                (Some(soft), hard)
            }
            GateMode::Oracle => {
                let labels: Vec<f64> = {
                    let mut g = vec![0.0; n];
                    for (bb, sample) in batch.iter().enumerate() {
                        for (tt, &need) in sample.needs_retrieval.iter().enumerate() {
                            if need {
                                g[tt * b + bb] = 1.0;
                            }
                        }
                    }
                    g
                };
                (None, tape.constant(labels, vec![n]))
            }
            GateMode::AlwaysOn => (None, tape.constant(vec![1.0; n], vec![n])),
            GateMode::AlwaysOff => (None, tape.constant(vec![0.0; n], vec![n])),
        };

        // KV cache source: ghost (hidden states) or raw embeddings.
        let kv_base = match cfg.kv_source {
            super::KvSource::GhostSsm => hidden,
            super::KvSource::RawEmbedding => emb,
        };
        let q = tape.matmul(hidden, leaves[p.w_q])?;
        let k = tape.matmul(kv_base, leaves[p.w_k])?;
        let v = tape.matmul(kv_base, leaves[p.w_v])?;

        // Constant sparse gates let the attention skip masked rows
        // outright; a learned gate needs every row's attention value for
        // its own gradient, and an always-on gate is cheapest on the
        // dense scoring path.
        let active: Option<Vec<bool>> = match cfg.gate_mode {
            GateMode::Oracle | GateMode::AlwaysOff => {
                Some(tape.data(hard).iter().map(|&x| x > 0.5).collect())
            }
            _ => None,
        };
        // Dropout regularizes the recurrent stack only. With k as small
        // as 3, zeroing selected attention weights starves the score
        // gradients and visibly stalls retrieval learning.
        let attn_raw = sparse_topk_attention(
            tape,
            q,
            k,
            v,
            t,
            b,
            cfg.n_heads,
            cfg.top_k,
            active.as_deref(),
        )?;
        let attn = tape.scale_rows(attn_raw, hard)?;

        // Combine and predict.
        let joint = tape.concat_lastdim(hidden, attn)?;
        let combined = tape.linear(joint, leaves[p.w_c], leaves[p.b_c])?;
        let logits = tape.linear(combined, leaves[p.w_out], leaves[p.b_out])?;

        let soft_gate_mean = soft.map(|s| tape.mean(s));
        let trace = GateTrace {
            raw_entropy: tape.data(raw_entropy).to_vec(),
            normalized_entropy: tape.data(norm_entropy).to_vec(),
            soft: soft.map(|s| tape.data(s).to_vec()),
            hard: Some(tape.data(hard).to_vec()),
        };

        Ok(ForwardPass {
            logits,
            leaves,
            soft_gate_mean,
            trace,
            ssm_logits: Some(ssm_logits),
            aux_ce_logits: Some(ssm_logits),
            hidden: Some(hidden),
            attn_out: Some(attn),
        })
    }

    fn param_set(&self) -> &ParamSet {
        &self.params
    }

    fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn kind(&self) -> &'static str {
        "amor"
    }
}

struct SsmOnlyIds {
    embedding: ParamId,
    gru: GruStackIds,
    w_o: ParamId,
    b_o: ParamId,
}

/// Backbone + output projection, nothing else.
pub struct SsmOnlyModel {
    pub cfg: ModelConfig,
    params: ParamSet,
    ids: SsmOnlyIds,
}

impl SsmOnlyModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let embedding = params.add_embedding("embedding", v, d, &mut rng);
        let gru = GruStackIds::init(&mut params, cfg.n_ssm_layers, d, &mut rng);
        let w_o = params.add_matrix("w_o", d, v, &mut rng);
        let b_o = params.add_zeros("b_o", vec![v]);
        Ok(SsmOnlyModel {
            cfg,
            params,
            ids: SsmOnlyIds {
                embedding,
                gru,
                w_o,
                b_o,
            },
        })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        let fresh = SsmOnlyModel::new(cfg, 0)?;
        debug_assert_eq!(fresh.params.params.len(), params.params.len());
        Ok(SsmOnlyModel { params, ..fresh })
    }
}

impl SequenceModel for SsmOnlyModel {
    fn forward(
        &self,
        tape: &mut Tape,
        batch: &[SequenceSample],
        train: bool,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let (ids, t, b) = time_major_tokens(batch);
        
        let p = &self.ids;
        let leaves = self.params.leaves(tape);

        let emb = tape.embedding_lookup(leaves[p.embedding], &ids)?;
        let hidden = gru_stack_forward(
            tape,
            &leaves,
            &p.gru,
            emb,
            t,
            b,
            self.cfg.dropout,
            train,
            rng,
        )?;
        let logits = tape.linear(hidden, leaves[p.w_o], leaves[p.b_o])?;

        let probs = tape.softmax_lastdim(logits);
        let raw_entropy = tape.row_entropy(probs);
        let norm_entropy =
            tape.scale(raw_entropy, 1.0 / (self.cfg.vocab_size as f64).ln());
        let trace = GateTrace {
            raw_entropy: tape.data(raw_entropy).to_vec(),
            normalized_entropy: tape.data(norm_entropy).to_vec(),
            soft: None,
            hard: None,
        };

        Ok(ForwardPass {
            logits,
            leaves,
            soft_gate_mean: None,
            trace,
            ssm_logits: Some(logits),
            aux_ce_logits: None,
            hidden: Some(hidden),
            attn_out: None,
        })
    }

    fn param_set(&self) -> &ParamSet {
        &self.params
    }

    fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn kind(&self) -> &'static str {
        "ssm_only"
    }
}
