//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The tape records every operation in execution order; [`Tape::backward`]
//! replays the records in reverse, accumulating gradients additively. Only
//! the operations the model needs exist here — no broadcasting beyond
//! scalar-vs-tensor, no views, everything row-major `Vec<f64>`.
//!
//! Matrix products are delegated to `matrixmultiply::dgemm`; all other
//! kernels are plain loops.

pub mod check;

use crate::error::{AmorError, Result};
use crate::rng::Rng;

/// Index of a tensor on its tape.
pub type TensorId = usize;

/// A dense row-major tensor. 1-D shapes are `[n]`, matrices `[rows, cols]`,
/// scalars `[1]`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// (rows, cols) view of the shape: 1-D tensors count as a single row.
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensors are at most 2-D, got {:?}", self.shape),
        }
    }
}

/// Context handed to custom operators during the backward sweep.
pub struct TapeView<'a> {
    nodes: &'a [Tensor],
}

impl TapeView<'_> {
    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }
}

/// A fused operator with a hand-written backward rule.
///
/// The caller computes the forward value itself and registers the node via
/// [`Tape::push_custom`]; the boxed op holds whatever context backward
/// needs (selection indices, attention weights, ...).
pub trait CustomOp {
    fn inputs(&self) -> Vec<TensorId>;

    /// Push each input's gradient contribution through `sink(input, grad)`.
    /// Inputs whose gradient is not needed may be skipped by the tape.
    /// `out_data` is the operator's own forward output.
    fn backward(
        &self,
        view: &TapeView<'_>,
        out_data: &[f64],
        out_grad: &[f64],
        sink: &mut dyn FnMut(TensorId, Vec<f64>),
    );
}

enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Linear { x: TensorId, w: TensorId, bias: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    Exp { x: TensorId },
    Log { x: TensorId },
    Scale { x: TensorId, c: f64 },
    SoftmaxLastDim { x: TensorId },
    RowEntropy { p: TensorId },
    CrossEntropy { logits: TensorId, targets: Vec<usize>, mask: Vec<bool> },
    TopkLastDim { x: TensorId, k: usize, indices: Vec<usize> },
    SteThreshold { p: TensorId },
    Relu { x: TensorId },
    ConcatLastDim { a: TensorId, b: TensorId },
    StackRows { parts: Vec<TensorId> },
    EmbeddingLookup { table: TensorId, ids: Vec<usize> },
    ScaleRows { x: TensorId, s: TensorId },
    Mean { x: TensorId },
    Sum { x: TensorId },
    SliceRows { x: TensorId, start: usize },
    RepeatRows { v: TensorId, times: usize },
    Transpose { x: TensorId },
    Detach,
    Dropout { x: TensorId, mask: Vec<f64> },
    Custom(Box<dyn CustomOp>),
}

/// Execution tape: tensors plus the operation that produced each one.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Row-major dgemm: c = a[m×k] · b[k×n].
pub(crate) fn dgemm_rowmajor(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output buffer for a gemm with beta = 0: dgemm overwrites every element,
/// so skipping the zero fill is safe.
pub(crate) fn uninit_buf(len: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(len);
    // SAFETY: the caller writes all `len` elements before reading any
    // (dgemm with beta = 0 assigns the full output).
    unsafe { v.set_len(len) };
    v
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Value of a scalar node.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id].numel(), 1);
        self.nodes[id].data[0]
    }

    /// Gradient of a node, if backward has produced one.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = self.nodes.len();
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad: false,
        });
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        id
    }

    fn ng(&self, id: TensorId) -> bool {
        self.needs_grad[id]
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        let id = self.push(data, shape, Op::Leaf, requires_grad);
        self.nodes[id].requires_grad = requires_grad;
        id
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, c: f64) -> TensorId {
        self.constant(vec![c], vec![1])
    }

    // ── Matrix product ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.nodes[a].rows_cols();
        let (kb, n) = self.nodes[b].rows_cols();
        if ka != kb || self.nodes[a].shape.len() != 2 || self.nodes[b].shape.len() != 2 {
            return Err(AmorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let mut c = uninit_buf(m * n);
        dgemm_rowmajor(m, ka, n, &self.nodes[a].data, &self.nodes[b].data, &mut c);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(c, vec![m, n], Op::MatMul { a, b }, ng))
    }

    /// Affine map `x · w + bias` with the bias broadcast across rows.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, kx) = self.nodes[x].rows_cols();
        let (kw, n) = self.nodes[w].rows_cols();
        if kx != kw || self.nodes[x].shape.len() != 2 || self.nodes[w].shape.len() != 2 {
            return Err(AmorError::ShapeMismatch {
                op: "linear",
                lhs: self.nodes[x].shape.clone(),
                rhs: self.nodes[w].shape.clone(),
            });
        }
        if self.nodes[bias].numel() != n {
            return Err(AmorError::ShapeMismatch {
                op: "linear",
                lhs: vec![m, n],
                rhs: self.nodes[bias].shape.clone(),
            });
        }
        let mut c = uninit_buf(m * n);
        dgemm_rowmajor(m, kx, n, &self.nodes[x].data, &self.nodes[w].data, &mut c);
        let bd = &self.nodes[bias].data;
        for row in c.chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(bd) {
                *v += bv;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(bias);
        Ok(self.push(c, vec![m, n], Op::Linear { x, w, bias }, ng))
    }

    // ── Elementwise binary (equal shapes or scalar broadcast) ────────

    fn binary_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<Vec<usize>> {
        let sa = &self.nodes[a].shape;
        let sb = &self.nodes[b].shape;
        let na = self.nodes[a].numel();
        let nb = self.nodes[b].numel();
        if sa == sb {
            Ok(sa.clone())
        } else if na == 1 {
            Ok(sb.clone())
        } else if nb == 1 {
            Ok(sa.clone())
        } else {
            Err(AmorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let shape = self.binary_shape(name, a, b)?;
        let ad = &self.nodes[a].data;
        let bd = &self.nodes[b].data;
        // Branch-free fast paths: equal shapes, then scalar broadcasts.
        let data: Vec<f64> = if ad.len() == bd.len() {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else if bd.len() == 1 {
            let y = bd[0];
            ad.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = ad[0];
            bd.iter().map(|&y| f(x, y)).collect()
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(data, shape, op, ng))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.ng(x);
        self.push(data, shape, op, ng)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(&bad) = self.nodes[x].data.iter().find(|&&v| v <= 0.0) {
            return Err(AmorError::LogDomain { value: bad });
        }
        Ok(self.unary(x, f64::ln, Op::Log { x }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| c * v, Op::Scale { x, c })
    }

    // ── Softmax / entropy / loss ─────────────────────────────────────

    /// Row-wise softmax over the last dimension, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> TensorId {
        let (rows, n) = self.nodes[x].rows_cols();
        let xd = &self.nodes[x].data;
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * n..(r + 1) * n];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let shape = self.nodes[x].shape.clone();
        let ng = self.ng(x);
        self.push(data, shape, Op::SoftmaxLastDim { x }, ng)
    }

    /// Shannon entropy of each row of a probability matrix, in nats, with
    /// the `0·log 0 := 0` convention. Output shape `[rows]`.
    pub fn row_entropy(&mut self, p: TensorId) -> TensorId {
        let (rows, n) = self.nodes[p].rows_cols();
        let pd = &self.nodes[p].data;
        let data: Vec<f64> = (0..rows)
            .map(|r| {
                -pd[r * n..(r + 1) * n]
                    .iter()
                    .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
                    .sum::<f64>()
            })
            .collect();
        let ng = self.ng(p);
        self.push(data, vec![rows], Op::RowEntropy { p }, ng)
    }

    /// Mean negative log-softmax probability of `targets` over masked rows,
    /// computed via log-sum-exp. Errors if the mask selects nothing.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let (rows, n) = self.nodes[logits].rows_cols();
        if targets.len() != rows || mask.len() != rows {
            return Err(AmorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!(
                    "{} logit rows vs {} targets / {} mask entries",
                    rows,
                    targets.len(),
                    mask.len()
                ),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(AmorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("target id {t} out of vocabulary {n}"),
            });
        }
        let selected = mask.iter().filter(|&&m| m).count();
        if selected == 0 {
            return Err(AmorError::EmptyMask);
        }
        let ld = &self.nodes[logits].data;
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &ld[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            vec![total / selected as f64],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    // ── Selection ────────────────────────────────────────────────────

    /// Row-wise top-k over the last dimension. Values come back in
    /// descending order; equal values keep the lowest index first.
    /// Returns `(values, indices)`; the backward rule routes gradient only
    /// to the selected positions.
    pub fn topk_lastdim(&mut self, x: TensorId, k: usize) -> Result<(TensorId, Vec<usize>)> {
        let (rows, n) = self.nodes[x].rows_cols();
        if k == 0 || k > n {
            return Err(AmorError::TopKTooLarge { k, n });
        }
        let xd = &self.nodes[x].data;
        let mut values = vec![0.0; rows * k];
        let mut indices = vec![0usize; rows * k];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let sel = top_k_indices(row, k);
            for (j, &i) in sel.iter().enumerate() {
                values[r * k + j] = row[i];
                indices[r * k + j] = i;
            }
        }
        let ng = self.ng(x);
        let id = self.push(
            values,
            vec![rows, k],
            Op::TopkLastDim {
                x,
                k,
                indices: indices.clone(),
            },
            ng,
        );
        Ok((id, indices))
    }

    /// Straight-through threshold: forward is exactly `1.0` where
    /// `p > level` (strict) and `0.0` elsewhere; backward passes the
    /// incoming gradient through unchanged.
    pub fn ste_threshold(&mut self, p: TensorId, level: f64) -> TensorId {
        self.unary(
            p,
            |v| if v > level { 1.0 } else { 0.0 },
            Op::SteThreshold { p },
        )
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    // ── Structural ops ───────────────────────────────────────────────

    /// Stack matrices with identical column counts along the row axis.
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        debug_assert!(!parts.is_empty());
        let cols = self.nodes[parts[0]].rows_cols().1;
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.nodes[p].rows_cols();
            if c != cols {
                return Err(AmorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.nodes[parts[0]].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p].data);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            data,
            vec![total_rows, cols],
            Op::StackRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_lastdim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.nodes[a].rows_cols();
        let (rb, cb) = self.nodes[b].rows_cols();
        if ra != rb {
            return Err(AmorError::ShapeMismatch {
                op: "concat_lastdim",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let one_dim = self.nodes[a].shape.len() == 1 && self.nodes[b].shape.len() == 1;
        let mut data = vec![0.0; ra * (ca + cb)];
        for r in 0..ra {
            data[r * (ca + cb)..r * (ca + cb) + ca]
                .copy_from_slice(&self.nodes[a].data[r * ca..(r + 1) * ca]);
            data[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                .copy_from_slice(&self.nodes[b].data[r * cb..(r + 1) * cb]);
        }
        let shape = if one_dim {
            vec![ca + cb]
        } else {
            vec![ra, ca + cb]
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(data, shape, Op::ConcatLastDim { a, b }, ng))
    }

    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (vocab, d) = self.nodes[table].rows_cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(AmorError::InvalidArgument {
                op: "embedding_lookup",
                msg: format!("token id {bad} out of vocabulary {vocab}"),
            });
        }
        let td = &self.nodes[table].data;
        let mut data = vec![0.0; ids.len() * d];
        for (r, &i) in ids.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&td[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            data,
            vec![ids.len(), d],
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Scale row `i` of `x` by `s[i]`. Gradients flow to both inputs;
    /// this is the op that applies the gate mask to attention output.
    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.nodes[x].rows_cols();
        if self.nodes[s].numel() != rows {
            return Err(AmorError::ShapeMismatch {
                op: "scale_rows",
                lhs: self.nodes[x].shape.clone(),
                rhs: self.nodes[s].shape.clone(),
            });
        }
        let xd = &self.nodes[x].data;
        let sd = &self.nodes[s].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let sr = sd[r];
            for c in 0..cols {
                data[r * cols + c] = xd[r * cols + c] * sr;
            }
        }
        let shape = self.nodes[x].shape.clone();
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(data, shape, Op::ScaleRows { x, s }, ng))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x].numel() as f64;
        let v = self.nodes[x].data.iter().sum::<f64>() / n;
        let ng = self.ng(x);
        self.push(vec![v], vec![1], Op::Mean { x }, ng)
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let v = self.nodes[x].data.iter().sum::<f64>();
        let ng = self.ng(x);
        self.push(vec![v], vec![1], Op::Sum { x }, ng)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.nodes[x].rows_cols();
        if start + len > rows {
            return Err(AmorError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {rows}", start + len),
            });
        }
        let data = self.nodes[x].data[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(x);
        Ok(self.push(data, vec![len, cols], Op::SliceRows { x, start }, ng))
    }

    /// Tile a vector into `times` identical rows (bias broadcast).
    pub fn repeat_rows(&mut self, v: TensorId, times: usize) -> Result<TensorId> {
        let (rows, n) = self.nodes[v].rows_cols();
        if rows != 1 {
            return Err(AmorError::InvalidArgument {
                op: "repeat_rows",
                msg: format!("expected a vector, got shape {:?}", self.nodes[v].shape),
            });
        }
        let mut data = vec![0.0; times * n];
        for r in 0..times {
            data[r * n..(r + 1) * n].copy_from_slice(&self.nodes[v].data);
        }
        let ng = self.ng(v);
        Ok(self.push(data, vec![times, n], Op::RepeatRows { v, times }, ng))
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let (rows, cols) = self.nodes[x].rows_cols();
        let xd = &self.nodes[x].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = xd[r * cols + c];
            }
        }
        let ng = self.ng(x);
        self.push(data, vec![cols, rows], Op::Transpose { x }, ng)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x].data.clone();
        let shape = self.nodes[x].shape.clone();
        self.push(data, shape, Op::Detach, false)
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`. The mask is drawn from `rng` and saved for backward.
    pub fn dropout(&mut self, x: TensorId, p: f64, rng: &mut Rng) -> TensorId {
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x].numel())
            .map(|_| if rng.chance(p) { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.nodes[x]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.ng(x);
        self.push(data, shape, Op::Dropout { x, mask }, ng)
    }

    /// Register a fused operator whose forward value was computed by the
    /// caller.
    pub fn push_custom(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        op: Box<dyn CustomOp>,
    ) -> TensorId {
        let ng = op.inputs().iter().any(|&i| self.ng(i));
        self.push(data, shape, Op::Custom(op), ng)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `root`. Gradients are reset first, so
    /// repeated calls on the same tape are idempotent.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root].numel() != 1 {
            return Err(AmorError::InvalidArgument {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", self.nodes[root].shape),
            });
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            if self.grads[i].is_none() || !self.needs_grad[i] {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.step_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, id: TensorId, contribution: Vec<f64>) {
        if !self.needs_grad[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn step_backward(&mut self, i: TensorId, g: &[f64]) {
        // Ops are matched by value where cheap; heavier ops borrow data
        // through locally collected inputs to satisfy the borrow checker.
        match &self.ops[i] {
            Op::Leaf | Op::Detach => {}

            &Op::MatMul { a, b } => {
                let (m, k) = self.nodes[a].rows_cols();
                let n = self.nodes[b].rows_cols().1;
                if self.ng(a) {
                    // ga = g · bᵀ
                    let mut ga = uninit_buf(m * k);
                    unsafe {
                        matrixmultiply::dgemm(
                            m,
                            n,
                            k,
                            1.0,
                            g.as_ptr(),
                            n as isize,
                            1,
                            self.nodes[b].data.as_ptr(),
                            1,
                            n as isize,
                            0.0,
                            ga.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    self.accum(a, ga);
                }
                if self.ng(b) {
                    // gb = aᵀ · g
                    let mut gb = uninit_buf(k * n);
                    unsafe {
                        matrixmultiply::dgemm(
                            k,
                            m,
                            n,
                            1.0,
                            self.nodes[a].data.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            0.0,
                            gb.as_mut_ptr(),
                            n as isize,
                        1,
                        );
                    }
                    self.accum(b, gb);
                }
            }

            &Op::Linear { x, w, bias } => {
                let (m, k) = self.nodes[x].rows_cols();
                let n = self.nodes[w].rows_cols().1;
                if self.ng(x) {
                    let mut gx = uninit_buf(m * k);
                    unsafe {
                        matrixmultiply::dgemm(
                            m, n, k, 1.0,
                            g.as_ptr(), n as isize, 1,
                            self.nodes[w].data.as_ptr(), 1, n as isize,
                            0.0,
                            gx.as_mut_ptr(), k as isize, 1,
                        );
                    }
                    self.accum(x, gx);
                }
                if self.ng(w) {
                    let mut gw = uninit_buf(k * n);
                    unsafe {
                        matrixmultiply::dgemm(
                            k, m, n, 1.0,
                            self.nodes[x].data.as_ptr(), 1, k as isize,
                            g.as_ptr(), n as isize, 1,
                            0.0,
                            gw.as_mut_ptr(), n as isize, 1,
                        );
                    }
                    self.accum(w, gw);
                }
                if self.ng(bias) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (acc, &gv) in gb.iter_mut().zip(row) {
                            *acc += gv;
                        }
                    }
                    self.accum(bias, gb);
                }
            }

            &Op::Add { a, b } => {
                if self.ng(a) {
                    self.accum(a, reduce_to(g, self.nodes[a].numel()));
                }
                if self.ng(b) {
                    self.accum(b, reduce_to(g, self.nodes[b].numel()));
                }
            }

            &Op::Sub { a, b } => {
                if self.ng(a) {
                    self.accum(a, reduce_to(g, self.nodes[a].numel()));
                }
                if self.ng(b) {
                    let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                    self.accum(b, reduce_to(&neg, self.nodes[b].numel()));
                }
            }

            &Op::Mul { a, b } => {
                let na = self.nodes[a].numel();
                let nb = self.nodes[b].numel();
                if self.ng(a) {
                    let bd = &self.nodes[b].data;
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(idx, &gv)| gv * bd[if nb == 1 { 0 } else { idx }])
                        .collect();
                    self.accum(a, reduce_to(&full, na));
                }
                if self.ng(b) {
                    let ad = &self.nodes[a].data;
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(idx, &gv)| gv * ad[if na == 1 { 0 } else { idx }])
                        .collect();
                    self.accum(b, reduce_to(&full, nb));
                }
            }

            &Op::Sigmoid { x } => {
                let out = &self.nodes[i].data;
                let gx: Vec<f64> = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &s)| gv * s * (1.0 - s))
                    .collect();
                self.accum(x, gx);
            }

            &Op::Tanh { x } => {
                let out = &self.nodes[i].data;
                let gx: Vec<f64> = g.iter().zip(out).map(|(&gv, &t)| gv * (1.0 - t * t)).collect();
                self.accum(x, gx);
            }

            &Op::Exp { x } => {
                let out = &self.nodes[i].data;
                let gx: Vec<f64> = g.iter().zip(out).map(|(&gv, &e)| gv * e).collect();
                self.accum(x, gx);
            }

            &Op::Log { x } => {
                let xd = &self.nodes[x].data;
                let gx: Vec<f64> = g.iter().zip(xd).map(|(&gv, &v)| gv / v).collect();
                self.accum(x, gx);
            }

            &Op::Scale { x, c } => {
                let gx: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                self.accum(x, gx);
            }

            &Op::SoftmaxLastDim { x } => {
                let (rows, n) = self.nodes[i].rows_cols();
                let p = &self.nodes[i].data;
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    let pr = &p[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..n {
                        gx[r * n + c] = pr[c] * (gr[c] - dot);
                    }
                }
                self.accum(x, gx);
            }

            &Op::RowEntropy { p } => {
                let (rows, n) = self.nodes[p].rows_cols();
                let pd = &self.nodes[p].data;
                let mut gp = vec![0.0; rows * n];
                for r in 0..rows {
                    for c in 0..n {
                        let v = pd[r * n + c];
                        if v > 0.0 {
                            gp[r * n + c] = -g[r] * (v.ln() + 1.0);
                        }
                    }
                }
                self.accum(p, gp);
            }

            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let logits = *logits;
                let (rows, n) = self.nodes[logits].rows_cols();
                let selected = mask.iter().filter(|&&m| m).count() as f64;
                let ld = &self.nodes[logits].data;
                let mut gl = vec![0.0; rows * n];
                let scale = g[0] / selected;
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let row = &ld[r * n..(r + 1) * n];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                    for c in 0..n {
                        let p = (row[c] - m).exp() / z;
                        gl[r * n + c] = scale * (p - if c == targets[r] { 1.0 } else { 0.0 });
                    }
                }
                self.accum(logits, gl);
            }

            Op::TopkLastDim { x, k, indices } => {
                let x = *x;
                let k = *k;
                let (rows, n) = self.nodes[x].rows_cols();
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    for j in 0..k {
                        gx[r * n + indices[r * k + j]] += g[r * k + j];
                    }
                }
                self.accum(x, gx);
            }

            &Op::SteThreshold { p } => {
                // Identity surrogate: the hard output behaves like the
                // soft probability in the backward pass.
                self.accum(p, g.to_vec());
            }

            &Op::Relu { x } => {
                let xd = &self.nodes[x].data;
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accum(x, gx);
            }

            Op::StackRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0usize;
                for p in parts {
                    let n = self.nodes[p].numel();
                    if self.ng(p) {
                        self.accum(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }

            &Op::ConcatLastDim { a, b } => {
                let ca = self.nodes[a].rows_cols().1;
                let cb = self.nodes[b].rows_cols().1;
                let rows = self.nodes[a].rows_cols().0;
                if self.ng(a) {
                    let mut ga = vec![0.0; rows * ca];
                    for r in 0..rows {
                        ga[r * ca..(r + 1) * ca]
                            .copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.accum(a, ga);
                }
                if self.ng(b) {
                    let mut gb = vec![0.0; rows * cb];
                    for r in 0..rows {
                        gb[r * cb..(r + 1) * cb]
                            .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    self.accum(b, gb);
                }
            }

            Op::EmbeddingLookup { table, ids } => {
                let table = *table;
                let (vocab, d) = self.nodes[table].rows_cols();
                let mut gt = vec![0.0; vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[r * d + c];
                    }
                }
                self.accum(table, gt);
            }

            &Op::ScaleRows { x, s } => {
                let (rows, cols) = self.nodes[x].rows_cols();
                if self.ng(x) {
                    let sd = &self.nodes[s].data;
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] = g[r * cols + c] * sd[r];
                        }
                    }
                    self.accum(x, gx);
                }
                if self.ng(s) {
                    let xd = &self.nodes[x].data;
                    let mut gs = vec![0.0; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            gs[r] += g[r * cols + c] * xd[r * cols + c];
                        }
                    }
                    self.accum(s, gs);
                }
            }

            &Op::Mean { x } => {
                let n = self.nodes[x].numel();
                let v = g[0] / n as f64;
                self.accum(x, vec![v; n]);
            }

            &Op::Sum { x } => {
                let n = self.nodes[x].numel();
                self.accum(x, vec![g[0]; n]);
            }

            &Op::SliceRows { x, start } => {
                let (rows, cols) = self.nodes[x].rows_cols();
                let len = self.nodes[i].rows_cols().0;
                let mut gx = vec![0.0; rows * cols];
                gx[start * cols..(start + len) * cols].copy_from_slice(g);
                self.accum(x, gx);
            }

            &Op::RepeatRows { v, times } => {
                let n = self.nodes[v].numel();
                let mut gv = vec![0.0; n];
                for r in 0..times {
                    for c in 0..n {
                        gv[c] += g[r * n + c];
                    }
                }
                self.accum(v, gv);
            }

            &Op::Transpose { x } => {
                let (rows, cols) = self.nodes[i].rows_cols();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[c * rows + r] = g[r * cols + c];
                    }
                }
                self.accum(x, gx);
            }

            Op::Dropout { x, mask } => {
                let x = *x;
                let gx: Vec<f64> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accum(x, gx);
            }

            Op::Custom(_) => {
                // Re-borrow dance: temporarily take the op out to call it
                // with a view of the nodes.
                let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
                if let Op::Custom(custom) = &op {
                    let mut pending: Vec<(TensorId, Vec<f64>)> = Vec::new();
                    {
                        let view = TapeView { nodes: &self.nodes };
                        let out_data = &self.nodes[i].data;
                        custom.backward(&view, out_data, g, &mut |id, grad| {
                            pending.push((id, grad))
                        });
                    }
                    for (id, grad) in pending {
                        self.accum(id, grad);
                    }
                }
                self.ops[i] = op;
            }
        }
    }
}

/// Deterministic row top-k: descending by value, ties to the lowest index.
pub(crate) fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut sel: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &v) in row.iter().enumerate() {
        // Find insertion point: strictly greater values stay ahead; equal
        // values keep their earlier (lower) index ahead.
        let mut pos = sel.len();
        while pos > 0 && v > row[sel[pos - 1]] {
            pos -= 1;
        }
        if pos < k {
            sel.insert(pos, i);
            if sel.len() > k {
                sel.pop();
            }
        }
    }
    sel
}

/// Sum a full-shape gradient down to a scalar when the input was broadcast.
fn reduce_to(g: &[f64], target_len: usize) -> Vec<f64> {
    if g.len() == target_len {
        g.to_vec()
    } else {
        debug_assert_eq!(target_len, 1);
        vec![g.iter().sum()]
    }
}

#[cfg(test)]
mod tests;
