//! Pre-norm causal transformer baseline with learned absolute positions.

use crate::error::{AmorError, Result};
use crate::rng::Rng;
use crate::tasks::SequenceSample;
use crate::tensor::Tape;

use super::attention::{dense_causal_attention, layer_norm};
use super::{
    time_major_tokens, ForwardPass, GateTrace, ModelConfig, ParamId, ParamSet, SequenceModel,
};

struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_q: ParamId,
    b_q: ParamId,
    w_k: ParamId,
    b_k: ParamId,
    w_v: ParamId,
    b_v: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_ff1: ParamId,
    b_ff1: ParamId,
    w_ff2: ParamId,
    b_ff2: ParamId,
}

struct TransformerIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    ln_f_g: ParamId,
    ln_f_b: ParamId,
    w_head: ParamId,
    b_head: ParamId,
}

/// Standard 2-layer causal transformer sized against the gated model.
pub struct TransformerModel {
    pub cfg: ModelConfig,
    params: ParamSet,
    ids: TransformerIds,
}

fn add_ones(params: &mut ParamSet, name: String, d: usize) -> ParamId {
    params.add(name, vec![1.0; d], vec![d])
}

impl TransformerModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let ff = cfg.ff_mult * d;

        let tok_emb = params.add_embedding("tok_emb", v, d, &mut rng);
        let pos_emb = params.add_embedding("pos_emb", cfg.max_seq_len, d, &mut rng);
        let blocks = (0..cfg.n_ssm_layers)
            .map(|l| BlockIds {
                ln1_g: add_ones(&mut params, format!("block{l}.ln1_g"), d),
                ln1_b: params.add_zeros(format!("block{l}.ln1_b"), vec![d]),
                w_q: params.add_matrix(format!("block{l}.w_q"), d, d, &mut rng),
                b_q: params.add_zeros(format!("block{l}.b_q"), vec![d]),
                w_k: params.add_matrix(format!("block{l}.w_k"), d, d, &mut rng),
                b_k: params.add_zeros(format!("block{l}.b_k"), vec![d]),
                w_v: params.add_matrix(format!("block{l}.w_v"), d, d, &mut rng),
                b_v: params.add_zeros(format!("block{l}.b_v"), vec![d]),
                w_proj: params.add_matrix(format!("block{l}.w_proj"), d, d, &mut rng),
                b_proj: params.add_zeros(format!("block{l}.b_proj"), vec![d]),
                ln2_g: add_ones(&mut params, format!("block{l}.ln2_g"), d),
                ln2_b: params.add_zeros(format!("block{l}.ln2_b"), vec![d]),
                w_ff1: params.add_matrix(format!("block{l}.w_ff1"), d, ff, &mut rng),
                b_ff1: params.add_zeros(format!("block{l}.b_ff1"), vec![ff]),
                w_ff2: params.add_matrix(format!("block{l}.w_ff2"), ff, d, &mut rng),
                b_ff2: params.add_zeros(format!("block{l}.b_ff2"), vec![d]),
            })
            .collect();
        let ln_f_g = add_ones(&mut params, "ln_f_g".into(), d);
        let ln_f_b = params.add_zeros("ln_f_b", vec![d]);
        let w_head = params.add_matrix("w_head", d, v, &mut rng);
        let b_head = params.add_zeros("b_head", vec![v]);

        Ok(TransformerModel {
            cfg,
            params,
            ids: TransformerIds {
                tok_emb,
                pos_emb,
                blocks,
                ln_f_g,
                ln_f_b,
                w_head,
                b_head,
            },
        })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        let fresh = TransformerModel::new(cfg, 0)?;
        debug_assert_eq!(fresh.params.params.len(), params.params.len());
        Ok(TransformerModel { params, ..fresh })
    }
}

impl SequenceModel for TransformerModel {
    fn forward(
        &self,
        tape: &mut Tape,
        batch: &[SequenceSample],
        train: bool,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let (ids, t, b) = time_major_tokens(batch);
        if t > self.cfg.max_seq_len {
            return Err(AmorError::InvalidArgument {
                op: "transformer_forward",
                msg: format!(
                    "sequence length {t} exceeds positional capacity {}",
                    self.cfg.max_seq_len
                ),
            });
        }
        let n = t * b;
        let p = &self.ids;
        let leaves = self.params.leaves(tape);

        let pos_ids: Vec<usize> = (0..n).map(|row| row / b).collect();
        let tok = tape.embedding_lookup(leaves[p.tok_emb], &ids)?;
        let pos = tape.embedding_lookup(leaves[p.pos_emb], &pos_ids)?;
        let mut x = tape.add(tok, pos)?;

        for block in &p.blocks {
            let normed = layer_norm(tape, x, leaves[block.ln1_g], leaves[block.ln1_b])?;
            let q = tape.linear(normed, leaves[block.w_q], leaves[block.b_q])?;
            let k = tape.linear(normed, leaves[block.w_k], leaves[block.b_k])?;
            let v = tape.linear(normed, leaves[block.w_v], leaves[block.b_v])?;
            let dropout = if train && self.cfg.dropout > 0.0 {
                Some((self.cfg.dropout, &mut *rng))
            } else {
                None
            };
            let attn = dense_causal_attention(tape, q, k, v, t, b, self.cfg.n_heads, dropout)?;
            let proj = tape.linear(attn, leaves[block.w_proj], leaves[block.b_proj])?;
            x = tape.add(x, proj)?;

            let normed2 = layer_norm(tape, x, leaves[block.ln2_g], leaves[block.ln2_b])?;
            let f1 = tape.linear(normed2, leaves[block.w_ff1], leaves[block.b_ff1])?;
            let act = tape.relu(f1);
            let f2 = tape.linear(act, leaves[block.w_ff2], leaves[block.b_ff2])?;
            x = tape.add(x, f2)?;
        }

        let final_norm = layer_norm(tape, x, leaves[p.ln_f_g], leaves[p.ln_f_b])?;
        let logits = tape.linear(final_norm, leaves[p.w_head], leaves[p.b_head])?;

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
            ssm_logits: None,
            aux_ce_logits: None,
            hidden: None,
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
        "transformer"
    }
}
