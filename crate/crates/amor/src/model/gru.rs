//! Stacked GRU backbone.
//!
//! Each layer follows the common reset-gate-inside-candidate formulation,
//! with row-vector states (`h · W`):
//!
//! ```text
//! z_t = sigmoid(x_t W_iz + b_iz + h_{t-1} W_hz + b_hz)      update gate
//! r_t = sigmoid(x_t W_ir + b_ir + h_{t-1} W_hr + b_hr)      reset gate
//! n_t = tanh  (x_t W_in + b_in + r_t ⊙ (h_{t-1} W_hn + b_hn))
//! h_t = (1 - z_t) ⊙ n_t + z_t ⊙ h_{t-1}
//! ```
//!
//! The initial state is zero. Inter-layer dropout applies at train time
//! only. All sequence tensors are time-major: row `t*B + b`.
//!
//! The input-side terms (`x W_i* + b_i*`) are ordinary tape matmuls over
//! the whole sequence; the sequential part runs as one fused scan per
//! layer with a hand-written backward, saving the per-step gate
//! activations it needs to replay the chain rule in reverse.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{uninit_buf, CustomOp, Tape, TapeView, TensorId};

use super::{ParamId, ParamSet};

/// Parameter ids of one GRU layer.
#[derive(Clone, Debug)]
pub struct GruLayerIds {
    pub w_iz: ParamId,
    pub w_ir: ParamId,
    pub w_in: ParamId,
    pub w_hz: ParamId,
    pub w_hr: ParamId,
    pub w_hn: ParamId,
    pub b_iz: ParamId,
    pub b_ir: ParamId,
    pub b_in: ParamId,
    pub b_hz: ParamId,
    pub b_hr: ParamId,
    pub b_hn: ParamId,
}

/// Parameter ids of the full stack.
#[derive(Clone, Debug)]
pub struct GruStackIds {
    pub layers: Vec<GruLayerIds>,
}

impl GruStackIds {
    /// Register stack parameters; every layer maps `d -> d`.
    pub fn init(params: &mut ParamSet, n_layers: usize, d: usize, rng: &mut Rng) -> Self {
        let layers = (0..n_layers)
            .map(|l| GruLayerIds {
                w_iz: params.add_matrix(format!("gru{l}.w_iz"), d, d, rng),
                w_ir: params.add_matrix(format!("gru{l}.w_ir"), d, d, rng),
                w_in: params.add_matrix(format!("gru{l}.w_in"), d, d, rng),
                w_hz: params.add_matrix(format!("gru{l}.w_hz"), d, d, rng),
                w_hr: params.add_matrix(format!("gru{l}.w_hr"), d, d, rng),
                w_hn: params.add_matrix(format!("gru{l}.w_hn"), d, d, rng),
                b_iz: params.add_zeros(format!("gru{l}.b_iz"), vec![d]),
                b_ir: params.add_zeros(format!("gru{l}.b_ir"), vec![d]),
                b_in: params.add_zeros(format!("gru{l}.b_in"), vec![d]),
                b_hz: params.add_zeros(format!("gru{l}.b_hz"), vec![d]),
                b_hr: params.add_zeros(format!("gru{l}.b_hr"), vec![d]),
                b_hn: params.add_zeros(format!("gru{l}.b_hn"), vec![d]),
            })
            .collect();
        GruStackIds { layers }
    }
}

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
) {
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1)
    }
}

/// One layer's full recurrence as a single tape node.
struct GruLayerScan {
    in_z: TensorId,
    in_r: TensorId,
    in_n: TensorId,
    w_hz: TensorId,
    w_hr: TensorId,
    w_hn: TensorId,
    b_hz: TensorId,
    b_hr: TensorId,
    b_hn: TensorId,
    t: usize,
    b: usize,
    d: usize,
    // Saved activations, all `[T*B, d]`.
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    /// `h_{t-1} W_hn + b_hn`, needed for the reset-gate gradient.
    hn_pre: Vec<f64>,
}

impl CustomOp for GruLayerScan {
    fn inputs(&self) -> Vec<TensorId> {
        vec![
            self.in_z, self.in_r, self.in_n, self.w_hz, self.w_hr, self.w_hn, self.b_hz,
            self.b_hr, self.b_hn,
        ]
    }

    fn backward(
        &self,
        view: &TapeView<'_>,
        h_all: &[f64],
        out_grad: &[f64],
        sink: &mut dyn FnMut(TensorId, Vec<f64>),
    ) {
        let (t, b, d) = (self.t, self.b, self.d);
        let rows = b * d;
        let w_hz = view.data(self.w_hz);
        let w_hr = view.data(self.w_hr);
        let w_hn = view.data(self.w_hn);

        let mut d_in_z = vec![0.0; t * rows];
        let mut d_in_r = vec![0.0; t * rows];
        let mut d_in_n = vec![0.0; t * rows];
        let mut dw_hz = vec![0.0; d * d];
        let mut dw_hr = vec![0.0; d * d];
        let mut dw_hn = vec![0.0; d * d];
        let mut db_hz = vec![0.0; d];
        let mut db_hr = vec![0.0; d];
        let mut db_hn = vec![0.0; d];

        let zeros = vec![0.0; rows];
        let mut carry = vec![0.0; rows];
        let mut dh = vec![0.0; rows];
        let mut dhn_pre = vec![0.0; rows];

        for tt in (0..t).rev() {
            let lo = tt * rows;
            let h_prev: &[f64] = if tt == 0 {
                &zeros
            } else {
                &h_all[lo - rows..lo]
            };
            for i in 0..rows {
                dh[i] = out_grad[lo + i] + carry[i];
            }
            let z = &self.z[lo..lo + rows];
            let r = &self.r[lo..lo + rows];
            let n = &self.n[lo..lo + rows];
            let hn_pre = &self.hn_pre[lo..lo + rows];

            // Elementwise chain through the blend and the three gates.
            let dz_pre = &mut d_in_z[lo..lo + rows];
            let dr_pre = &mut d_in_r[lo..lo + rows];
            let dn_pre = &mut d_in_n[lo..lo + rows];
            for i in 0..rows {
                let dn = dh[i] * (1.0 - z[i]);
                let dz = dh[i] * (h_prev[i] - n[i]);
                dn_pre[i] = dn * (1.0 - n[i] * n[i]);
                dz_pre[i] = dz * z[i] * (1.0 - z[i]);
                let dr = dn_pre[i] * hn_pre[i];
                dr_pre[i] = dr * r[i] * (1.0 - r[i]);
                dhn_pre[i] = dn_pre[i] * r[i];
                carry[i] = dh[i] * z[i];
            }
            for bb in 0..b {
                for j in 0..d {
                    db_hz[j] += dz_pre[bb * d + j];
                    db_hr[j] += dr_pre[bb * d + j];
                    db_hn[j] += dhn_pre[bb * d + j];
                }
            }
            unsafe {
                // Accumulate weight gradients: dW += h_prevᵀ · d*_pre.
                let hp = h_prev.as_ptr();
                dgemm(d, b, d, 1.0, hp, 1, d as isize, dz_pre.as_ptr(), d as isize, 1, 1.0, dw_hz.as_mut_ptr());
                dgemm(d, b, d, 1.0, hp, 1, d as isize, dr_pre.as_ptr(), d as isize, 1, 1.0, dw_hr.as_mut_ptr());
                dgemm(d, b, d, 1.0, hp, 1, d as isize, dhn_pre.as_ptr(), d as isize, 1, 1.0, dw_hn.as_mut_ptr());
                // Recurrent carry: dh_prev += d*_pre · W_h*ᵀ.
                dgemm(b, d, d, 1.0, dz_pre.as_ptr(), d as isize, 1, w_hz.as_ptr(), 1, d as isize, 1.0, carry.as_mut_ptr());
                dgemm(b, d, d, 1.0, dr_pre.as_ptr(), d as isize, 1, w_hr.as_ptr(), 1, d as isize, 1.0, carry.as_mut_ptr());
                dgemm(b, d, d, 1.0, dhn_pre.as_ptr(), d as isize, 1, w_hn.as_ptr(), 1, d as isize, 1.0, carry.as_mut_ptr());
            }
        }

        sink(self.in_z, d_in_z);
        sink(self.in_r, d_in_r);
        sink(self.in_n, d_in_n);
        sink(self.w_hz, dw_hz);
        sink(self.w_hr, dw_hr);
        sink(self.w_hn, dw_hn);
        sink(self.b_hz, db_hz);
        sink(self.b_hr, db_hr);
        sink(self.b_hn, db_hn);
    }
}

#[allow(clippy::too_many_arguments)]
fn gru_layer_scan(
    tape: &mut Tape,
    in_z: TensorId,
    in_r: TensorId,
    in_n: TensorId,
    w_hz: TensorId,
    w_hr: TensorId,
    w_hn: TensorId,
    b_hz: TensorId,
    b_hr: TensorId,
    b_hn: TensorId,
    t: usize,
    b: usize,
) -> TensorId {
    let d = tape.shape(w_hz)[0];
    let rows = b * d;
    let n_total = t * rows;
    let iz = tape.data(in_z).to_vec();
    let ir = tape.data(in_r).to_vec();
    let inn = tape.data(in_n).to_vec();
    let whz = tape.data(w_hz).to_vec();
    let whr = tape.data(w_hr).to_vec();
    let whn = tape.data(w_hn).to_vec();
    let bhz = tape.data(b_hz).to_vec();
    let bhr = tape.data(b_hr).to_vec();
    let bhn = tape.data(b_hn).to_vec();

    let mut h_all = vec![0.0; n_total];
    let mut z_all = vec![0.0; n_total];
    let mut r_all = vec![0.0; n_total];
    let mut n_all = vec![0.0; n_total];
    let mut hn_pre_all = vec![0.0; n_total];
    let zeros = vec![0.0; rows];
    let mut rec_z = uninit_buf(rows);
    let mut rec_r = uninit_buf(rows);

    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    for tt in 0..t {
        let lo = tt * rows;
        let h_prev: &[f64] = if tt == 0 {
            &zeros
        } else {
            // Split borrow: previous rows are already final.
            unsafe { std::slice::from_raw_parts(h_all.as_ptr().add(lo - rows), rows) }
        };
        unsafe {
            let hp = h_prev.as_ptr();
            dgemm(b, d, d, 1.0, hp, d as isize, 1, whz.as_ptr(), d as isize, 1, 0.0, rec_z.as_mut_ptr());
            dgemm(b, d, d, 1.0, hp, d as isize, 1, whr.as_ptr(), d as isize, 1, 0.0, rec_r.as_mut_ptr());
            dgemm(b, d, d, 1.0, hp, d as isize, 1, whn.as_ptr(), d as isize, 1, 0.0, hn_pre_all.as_mut_ptr().add(lo));
        }
        for bb in 0..b {
            for j in 0..d {
                let i = bb * d + j;
                let gi = lo + i;
                let z = sigmoid(iz[gi] + rec_z[i] + bhz[j]);
                let r = sigmoid(ir[gi] + rec_r[i] + bhr[j]);
                let hn = hn_pre_all[gi] + bhn[j];
                hn_pre_all[gi] = hn;
                let n = (inn[gi] + r * hn).tanh();
                z_all[gi] = z;
                r_all[gi] = r;
                n_all[gi] = n;
                h_all[gi] = (1.0 - z) * n + z * h_prev[i];
            }
        }
    }

    let op = GruLayerScan {
        in_z,
        in_r,
        in_n,
        w_hz,
        w_hr,
        w_hn,
        b_hz,
        b_hr,
        b_hn,
        t,
        b,
        d,
        z: z_all,
        r: r_all,
        n: n_all,
        hn_pre: hn_pre_all,
    };
    tape.push_custom(h_all, vec![t * b, d], Box::new(op))
}

/// Run the stack over a time-major input `[T*B, d]`, returning the top
/// layer's hidden states `[T*B, d]`.
#[allow(clippy::too_many_arguments)]
pub fn gru_stack_forward(
    tape: &mut Tape,
    leaves: &[TensorId],
    ids: &GruStackIds,
    x: TensorId,
    t: usize,
    b: usize,
    dropout: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<TensorId> {
    
    let mut layer_in = x;
    let n_layers = ids.layers.len();
    for (l, layer) in ids.layers.iter().enumerate() {
        // Input-side pre-activations for the whole sequence at once.
        let in_z = tape.linear(layer_in, leaves[layer.w_iz], leaves[layer.b_iz])?;
        let in_r = tape.linear(layer_in, leaves[layer.w_ir], leaves[layer.b_ir])?;
        let in_n = tape.linear(layer_in, leaves[layer.w_in], leaves[layer.b_in])?;
        let out = gru_layer_scan(
            tape,
            in_z,
            in_r,
            in_n,
            leaves[layer.w_hz],
            leaves[layer.w_hr],
            leaves[layer.w_hn],
            leaves[layer.b_hz],
            leaves[layer.b_hr],
            leaves[layer.b_hn],
            t,
            b,
        );
        layer_in = if train && dropout > 0.0 && l + 1 < n_layers {
            tape.dropout(out, dropout, rng)
        } else {
            out
        };
    }
    Ok(layer_in)
}
