//! Fused attention operators with hand-written backward rules.
//!
//! Both operators take time-major projections `[T*B, d]` and treat the
//! feature axis as `n_heads` independent slices of width `d / n_heads`.
//! Scores are `q · k / sqrt(d_head)`.
//!
//! [`sparse_topk_attention`] — strictly-past causal window: softmax over
//! the full history, then aggregation restricted to the top-k weights
//! (clamped to the available history, not renormalized). Keeping the
//! dense normalizer gives every past position a score gradient, so the
//! selection can migrate toward useful keys instead of freezing on its
//! initial picks. Row `t = 0` has no history and yields zeros.
//!
//! [`dense_causal_attention`] — the standard transformer pattern: softmax
//! over all positions up to and including the current one.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{top_k_indices, CustomOp, Tape, TapeView, TensorId};

/// Strided dgemm wrapper so Q/K/V blocks can be consumed in place.
#[allow(clippy::too_many_arguments)]
unsafe fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    beta: f64,
    c: *mut f64,
    rsc: isize,
    csc: isize,
) {
    unsafe { matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
}

// ── Sparse top-k attention ───────────────────────────────────────────

struct SparseTopkAttention {
    q: TensorId,
    k: TensorId,
    v: TensorId,
    t: usize,
    b: usize,
    n_heads: usize,
    d: usize,
    scale: f64,
    top_k: usize,
    /// Range of each slot `(bb*n_heads + h)*t + tt` into `probs`; active
    /// rows store their full past-window softmax (length `tt`).
    offsets: Vec<u32>,
    probs: Vec<f64>,
}

impl CustomOp for SparseTopkAttention {
    fn inputs(&self) -> Vec<TensorId> {
        vec![self.q, self.k, self.v]
    }

    fn backward(
        &self,
        view: &TapeView<'_>,
        _out_data: &[f64],
        out_grad: &[f64],
        sink: &mut dyn FnMut(TensorId, Vec<f64>),
    ) {
        let (t, b, d, dh) = (self.t, self.b, self.d, self.d / self.n_heads);
        let qd = view.data(self.q);
        let kd = view.data(self.k);
        let vd = view.data(self.v);
        let n = t * b;
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dw = vec![0.0; t];

        for bb in 0..b {
            for h in 0..self.n_heads {
                let hc = h * dh;
                for tt in 1..t {
                    let slot = (bb * self.n_heads + h) * t + tt;
                    let lo = self.offsets[slot] as usize;
                    let hi = self.offsets[slot + 1] as usize;
                    if lo == hi {
                        continue;
                    }
                    let p = &self.probs[lo..hi];
                    let row = tt * b + bb;
                    let go = &out_grad[row * d + hc..row * d + hc + dh];
                    // Selection is a pure function of the stored weights.
                    let kk = self.top_k.min(tt);
                    let sel = top_k_indices(p, kk);

                    // dL/d(weight_i) for aggregated entries, plus the
                    // normalizer coupling to every past position.
                    let mut pdp = 0.0;
                    dw[..tt].iter_mut().for_each(|x| *x = 0.0);
                    for &i in &sel {
                        let krow = (i * b + bb) * d + hc;
                        let dwi: f64 =
                            go.iter().zip(&vd[krow..krow + dh]).map(|(&a, &x)| a * x).sum();
                        dw[i] = dwi;
                        pdp += p[i] * dwi;
                        for c in 0..dh {
                            dv[krow + c] += p[i] * go[c];
                        }
                    }
                    let qrow = row * d + hc;
                    for j in 0..tt {
                        let ds = p[j] * (dw[j] - pdp) * self.scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kcol = (j * b + bb) * d + hc;
                        for c in 0..dh {
                            dq[qrow + c] += ds * kd[kcol + c];
                            dk[kcol + c] += ds * qd[qrow + c];
                        }
                    }
                }
            }
        }
        sink(self.q, dq);
        sink(self.k, dk);
        sink(self.v, dv);
    }
}

/// Sparse top-k attention over strictly-past positions: dense softmax over
/// the history, aggregation over the k largest weights only.
///
/// `active`, when given, marks the rows whose attention output is actually
/// consumed (a constant gate pattern); other rows are zero and cost
/// nothing. Leave it `None` whenever the gate is learned, so the gate
/// gradient sees every row's attention value.
#[allow(clippy::too_many_arguments)]
pub fn sparse_topk_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    t: usize,
    b: usize,
    n_heads: usize,
    top_k: usize,
    active: Option<&[bool]>,
) -> Result<TensorId> {
    let d = tape.shape(q)[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = t * b;
    let qd = tape.data(q).to_vec();
    let kd = tape.data(k).to_vec();
    let vd = tape.data(v).to_vec();

    let mut out = vec![0.0; n * d];
    let mut offsets = vec![0u32; b * n_heads * t + 1];
    let mut probs: Vec<f64> = Vec::new();

    // Scratch reused per (sample, head).
    let mut scores = vec![0.0; t * t];
    let mut row_scores: Vec<f64> = Vec::with_capacity(t);

    for bb in 0..b {
        for h in 0..n_heads {
            let hc = h * dh;
            let dense = active.is_none();
            if dense {
                // All rows needed: one dgemm per (sample, head).
                unsafe {
                    dgemm(
                        t,
                        dh,
                        t,
                        scale,
                        qd.as_ptr().add(bb * d + hc),
                        (b * d) as isize,
                        1,
                        kd.as_ptr().add(bb * d + hc),
                        1,
                        (b * d) as isize,
                        0.0,
                        scores.as_mut_ptr(),
                        t as isize,
                        1,
                    );
                }
            }
            for tt in 0..t {
                let slot = (bb * n_heads + h) * t + tt;
                offsets[slot] = probs.len() as u32;
                let row = tt * b + bb;
                let is_active = active.map_or(true, |a| a[row]);
                if tt == 0 || !is_active {
                    continue;
                }
                let past: &[f64] = if dense {
                    &scores[tt * t..tt * t + tt]
                } else {
                    row_scores.clear();
                    let qrow = &qd[row * d + hc..row * d + hc + dh];
                    for tp in 0..tt {
                        let kcol = (tp * b + bb) * d + hc;
                        let dot: f64 = qrow
                            .iter()
                            .zip(&kd[kcol..kcol + dh])
                            .map(|(&a, &x)| a * x)
                            .sum();
                        row_scores.push(dot * scale);
                    }
                    &row_scores
                };

                // Dense softmax over the history.
                let m = past.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let base = probs.len();
                let mut z = 0.0;
                for &s in past {
                    let e = (s - m).exp();
                    probs.push(e);
                    z += e;
                }
                for p in &mut probs[base..] {
                    *p /= z;
                }

                // Aggregate the k heaviest positions only.
                let kk = top_k.min(tt);
                let p_row = &probs[base..base + tt];
                let sel = top_k_indices(p_row, kk);
                let ocol = row * d + hc;
                for &i in &sel {
                    let w = p_row[i];
                    let vcol = (i * b + bb) * d + hc;
                    for c in 0..dh {
                        out[ocol + c] += w * vd[vcol + c];
                    }
                }
            }
        }
    }
    *offsets.last_mut().expect("non-empty") = probs.len() as u32;

    let op = SparseTopkAttention {
        q,
        k,
        v,
        t,
        b,
        n_heads,
        d,
        scale,
        top_k,
        offsets,
        probs,
    };
    Ok(tape.push_custom(out, vec![n, d], Box::new(op)))
}

// ── Dense causal attention ───────────────────────────────────────────

struct DenseCausalAttention {
    q: TensorId,
    k: TensorId,
    v: TensorId,
    t: usize,
    b: usize,
    n_heads: usize,
    d: usize,
    scale: f64,
    /// Softmax probabilities, `[b*n_heads, t*t]` row-major, zero above the
    /// diagonal.
    probs: Vec<f64>,
    /// Dropout scales in the same layout (empty when not training).
    drops: Vec<f64>,
}

impl CustomOp for DenseCausalAttention {
    fn inputs(&self) -> Vec<TensorId> {
        vec![self.q, self.k, self.v]
    }

    fn backward(
        &self,
        view: &TapeView<'_>,
        _out_data: &[f64],
        out_grad: &[f64],
        sink: &mut dyn FnMut(TensorId, Vec<f64>),
    ) {
        let (t, b, d, dh) = (self.t, self.b, self.d, self.d / self.n_heads);
        let qd = view.data(self.q);
        let kd = view.data(self.k);
        let vd = view.data(self.v);
        let n = t * b;
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dpe = vec![0.0; t * t];
        let mut ds = vec![0.0; t * t];
        let mut pe = vec![0.0; t * t];

        for bb in 0..b {
            for h in 0..self.n_heads {
                let hc = h * dh;
                let block = (bb * self.n_heads + h) * t * t;
                let p = &self.probs[block..block + t * t];
                for i in 0..t * t {
                    pe[i] = p[i] * if self.drops.is_empty() { 1.0 } else { self.drops[block + i] };
                }
                unsafe {
                    // dPe = dOut · Vᵀ
                    dgemm(
                        t,
                        dh,
                        t,
                        1.0,
                        out_grad.as_ptr().add(bb * d + hc),
                        (b * d) as isize,
                        1,
                        vd.as_ptr().add(bb * d + hc),
                        1,
                        (b * d) as isize,
                        0.0,
                        dpe.as_mut_ptr(),
                        t as isize,
                        1,
                    );
                }
                // Softmax Jacobian per row, on the causal window.
                for tt in 0..t {
                    let lo = tt * t;
                    let hi = lo + tt + 1;
                    let mut pdp = 0.0;
                    for i in lo..hi {
                        let dp = dpe[i]
                            * if self.drops.is_empty() {
                                1.0
                            } else {
                                self.drops[block + i]
                            };
                        ds[i] = dp;
                        pdp += p[i] * dp;
                    }
                    for i in lo..hi {
                        ds[i] = p[i] * (ds[i] - pdp);
                    }
                    for i in hi..lo + t {
                        ds[i] = 0.0;
                    }
                }
                unsafe {
                    // dQ += scale · dS · K
                    dgemm(
                        t,
                        t,
                        dh,
                        self.scale,
                        ds.as_ptr(),
                        t as isize,
                        1,
                        kd.as_ptr().add(bb * d + hc),
                        (b * d) as isize,
                        1,
                        0.0,
                        dq.as_mut_ptr().add(bb * d + hc),
                        (b * d) as isize,
                        1,
                    );
                    // dK += scale · dSᵀ · Q
                    dgemm(
                        t,
                        t,
                        dh,
                        self.scale,
                        ds.as_ptr(),
                        1,
                        t as isize,
                        qd.as_ptr().add(bb * d + hc),
                        (b * d) as isize,
                        1,
                        0.0,
                        dk.as_mut_ptr().add(bb * d + hc),
                        (b * d) as isize,
                        1,
                    );
                    // dV += Peᵀ · dOut
                    dgemm(
                        t,
                        t,
                        dh,
                        1.0,
                        pe.as_ptr(),
                        1,
                        t as isize,
                        out_grad.as_ptr().add(bb * d + hc),
                        (b * d) as isize,
                        1,
                        0.0,
                        dv.as_mut_ptr().add(bb * d + hc),
                        (b * d) as isize,
                        1,
                    );
                }
            }
        }
        sink(self.q, dq);
        sink(self.k, dk);
        sink(self.v, dv);
    }
}

/// Standard multi-head causal attention (each position sees itself and
/// everything before it).
#[allow(clippy::too_many_arguments)]
pub fn dense_causal_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    t: usize,
    b: usize,
    n_heads: usize,
    mut dropout: Option<(f64, &mut Rng)>,
) -> Result<TensorId> {
    let d = tape.shape(q)[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = t * b;
    let qd = tape.data(q).to_vec();
    let kd = tape.data(k).to_vec();
    let vd = tape.data(v).to_vec();

    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; b * n_heads * t * t];
    let mut drops: Vec<f64> = Vec::new();
    let train = dropout.is_some();
    if train {
        drops = vec![1.0; b * n_heads * t * t];
    }
    let mut scores = vec![0.0; t * t];
    let mut pe = vec![0.0; t * t];

    for bb in 0..b {
        for h in 0..n_heads {
            let hc = h * dh;
            let block = (bb * n_heads + h) * t * t;
            unsafe {
                dgemm(
                    t,
                    dh,
                    t,
                    scale,
                    qd.as_ptr().add(bb * d + hc),
                    (b * d) as isize,
                    1,
                    kd.as_ptr().add(bb * d + hc),
                    1,
                    (b * d) as isize,
                    0.0,
                    scores.as_mut_ptr(),
                    t as isize,
                    1,
                );
            }
            for tt in 0..t {
                let lo = tt * t;
                let window = &scores[lo..lo + tt + 1];
                let m = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..=tt {
                    let e = (scores[lo + i] - m).exp();
                    probs[block + lo + i] = e;
                    z += e;
                }
                for i in 0..=tt {
                    probs[block + lo + i] /= z;
                }
                if let Some((p_drop, ref mut rng)) = dropout {
                    let keep = 1.0 / (1.0 - p_drop);
                    for i in 0..=tt {
                        drops[block + lo + i] = if rng.chance(p_drop) { 0.0 } else { keep };
                    }
                }
                for i in 0..t {
                    pe[lo + i] = if i <= tt {
                        probs[block + lo + i] * if train { drops[block + lo + i] } else { 1.0 }
                    } else {
                        0.0
                    };
                }
            }
            unsafe {
                // Out_bh = Pe · V_bh
                dgemm(
                    t,
                    t,
                    dh,
                    1.0,
                    pe.as_ptr(),
                    t as isize,
                    1,
                    vd.as_ptr().add(bb * d + hc),
                    (b * d) as isize,
                    1,
                    0.0,
                    out.as_mut_ptr().add(bb * d + hc),
                    (b * d) as isize,
                    1,
                );
            }
        }
    }

    let op = DenseCausalAttention {
        q,
        k,
        v,
        t,
        b,
        n_heads,
        d,
        scale,
        probs,
        drops,
    };
    Ok(tape.push_custom(out, vec![n, d], Box::new(op)))
}

// ── Layer norm ───────────────────────────────────────────────────────

const LN_EPS: f64 = 1e-5;

struct LayerNorm {
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
}

impl CustomOp for LayerNorm {
    fn inputs(&self) -> Vec<TensorId> {
        vec![self.x, self.gamma, self.beta]
    }

    fn backward(
        &self,
        view: &TapeView<'_>,
        _out_data: &[f64],
        out_grad: &[f64],
        sink: &mut dyn FnMut(TensorId, Vec<f64>),
    ) {
        let shape = view.shape(self.x);
        let (rows, d) = (shape[0], shape[1]);
        let xd = view.data(self.x);
        let gd = view.data(self.gamma);
        let mut dx = vec![0.0; rows * d];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let df = d as f64;
        for r in 0..rows {
            let x = &xd[r * d..(r + 1) * d];
            let g = &out_grad[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / df;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            let mut dxh_sum = 0.0;
            let mut dxh_xh_sum = 0.0;
            for j in 0..d {
                let xh = (x[j] - mean) * inv_std;
                dgamma[j] += g[j] * xh;
                dbeta[j] += g[j];
                let dxh = g[j] * gd[j];
                dxh_sum += dxh;
                dxh_xh_sum += dxh * xh;
            }
            for j in 0..d {
                let xh = (x[j] - mean) * inv_std;
                let dxh = g[j] * gd[j];
                dx[r * d + j] = inv_std / df * (df * dxh - dxh_sum - xh * dxh_xh_sum);
            }
        }
        sink(self.x, dx);
        sink(self.gamma, dgamma);
        sink(self.beta, dbeta);
    }
}

/// Row-wise layer normalization with learned scale and shift.
pub fn layer_norm(tape: &mut Tape, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    let (rows, d) = (shape[0], shape[1]);
    let xd = tape.data(x);
    let gd = tape.data(gamma);
    let bd = tape.data(beta);
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
        }
    }
    let op = LayerNorm { x, gamma, beta };
    Ok(tape.push_custom(out, shape, Box::new(op)))
}
