use alloc::vec;
use alloc::vec::Vec;

use libm::{erf, exp, log, sqrt};

use crate::error::CoreError;
use crate::Result;

use super::Tensor;

/// Index of a node on the tape.
pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    /// y = alpha * x + beta, elementwise.
    AffineScalar { a: NodeId, alpha: f64 },
    /// matrix + row vector, broadcast over rows.
    AddRowBroadcast { a: NodeId, bias: NodeId },
    Gelu { a: NodeId },
    Sigmoid { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId },
    SoftmaxRows { a: NodeId },
    CrossEntropyMean { logits: NodeId, labels: Vec<usize> },
    MeanPoolRows { a: NodeId },
    SumAll { a: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize, end: usize },
    Reshape { a: NodeId },
    ClampUnit { a: NodeId },
    /// Image (1, h*w*c) -> patch matrix ((h/p)*(w/p), p*p*c).
    Unfold { a: NodeId, h: usize, w: usize, c: usize, p: usize },
    /// Each element repeated k times along the row: (r, c) -> (r, c*k).
    RepeatInterleave { a: NodeId, k: usize },
}

struct Node {
    value: Vec<f64>,
    grad: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Reverse-mode tape: records primitive operations eagerly, then propagates
/// adjoints from a scalar root back to every leaf.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node {
            grad: vec![0.0; value.len()],
            value,
            rows,
            cols,
            op,
        });
        id
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        self.push(data, rows, cols, Op::Leaf)
    }

    /// Enters a tensor's values as a leaf (exact f32 -> f64 widening).
    pub fn leaf_tensor(&mut self, t: &Tensor) -> NodeId {
        let (r, c) = t.tape_dims();
        self.leaf(r, c, t.to_f64())
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    fn shape_err(&self, context: &'static str, a: NodeId, b: NodeId) -> CoreError {
        CoreError::ShapeMismatch {
            context,
            left: vec![self.nodes[a].rows, self.nodes[a].cols],
            right: vec![self.nodes[b].rows, self.nodes[b].cols],
        }
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul inner extents", a, b));
        }
        let out = matmul_nn(&self.nodes[a].value, &self.nodes[b].value, m, k, n);
        Ok(self.push(out, m, n, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v = &self.nodes[a].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(out, c, r, Op::Transpose { a })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("elementwise add", a, b));
        }
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(out, r, c, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("elementwise sub", a, b));
        }
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(out, r, c, Op::Sub { a, b }))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("elementwise mul", a, b));
        }
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(out, r, c, Op::MulElem { a, b }))
    }

    pub fn affine_scalar(&mut self, a: NodeId, alpha: f64, beta: f64) -> NodeId {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| alpha * x + beta).collect();
        self.push(out, r, c, Op::AffineScalar { a, alpha })
    }

    pub fn scale(&mut self, a: NodeId, alpha: f64) -> NodeId {
        self.affine_scalar(a, alpha, 0.0)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != c {
            return Err(self.shape_err("row-broadcast add", a, bias));
        }
        let bv = self.nodes[bias].value.clone();
        let mut out = self.nodes[a].value.clone();
        for row in out.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(&bv) {
                *x += b;
            }
        }
        Ok(self.push(out, r, c, Op::AddRowBroadcast { a, bias }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .map(|&x| 0.5 * x * (1.0 + erf(x * INV_SQRT_2)))
            .collect();
        self.push(out, r, c, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(out, r, c, Op::Sigmoid { a })
    }

    /// Per-row layer normalization with learnable gain and shift.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if self.dims(gamma) != (1, c) {
            return Err(self.shape_err("layernorm gain", a, gamma));
        }
        if self.dims(beta) != (1, c) {
            return Err(self.shape_err("layernorm shift", a, beta));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a].value[i * c..(i + 1) * c];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / sqrt(var + LN_EPS);
            let g = &self.nodes[gamma].value;
            let b = &self.nodes[beta].value;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(out, r, c, Op::LayerNorm { a, gamma, beta }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a].value[i * c..(i + 1) * c];
            softmax_into(row, &mut out[i * c..(i + 1) * c]);
        }
        self.push(out, r, c, Op::SoftmaxRows { a })
    }

    /// Mean cross-entropy of logits rows against class labels.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (r, k) = self.dims(logits);
        if labels.len() != r {
            return Err(CoreError::ShapeMismatch {
                context: "cross-entropy labels vs logits rows",
                left: vec![labels.len()],
                right: vec![r],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(CoreError::IndexOutOfRange {
                context: "cross-entropy label",
                index: bad,
                bound: k,
            });
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &self.nodes[logits].value[i * k..(i + 1) * k];
            total -= log_softmax_at(row, label);
        }
        let mean = total / r as f64;
        Ok(self.push(
            vec![mean],
            1,
            1,
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean over rows: (r, c) -> (1, c).
    pub fn mean_pool_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.nodes[a].value.chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        self.push(out, 1, c, Op::MeanPoolRows { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.iter().sum();
        self.push(vec![s], 1, 1, Op::SumAll { a })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        debug_assert!(!parts.is_empty());
        let c = self.dims(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(self.shape_err("concat rows column widths", parts[0], p));
            }
            rows += pr;
            out.extend_from_slice(&self.nodes[p].value);
        }
        Ok(self.push(out, rows, c, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        debug_assert!(!parts.is_empty());
        let r = self.dims(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(self.shape_err("concat cols row counts", parts[0], p));
            }
            cols += pc;
        }
        let mut out = vec![0.0; r * cols];
        let mut offset = 0;
        for &p in parts {
            let pc = self.dims(p).1;
            for i in 0..r {
                out[i * cols + offset..i * cols + offset + pc]
                    .copy_from_slice(&self.nodes[p].value[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        Ok(self.push(out, r, cols, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if start >= end || end > r {
            return Err(CoreError::IndexOutOfRange {
                context: "slice rows",
                index: end,
                bound: r,
            });
        }
        let out = self.nodes[a].value[start * c..end * c].to_vec();
        Ok(self.push(out, end - start, c, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(CoreError::IndexOutOfRange {
                context: "slice cols",
                index: end,
                bound: c,
            });
        }
        let w = end - start;
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w]
                .copy_from_slice(&self.nodes[a].value[i * c + start..i * c + end]);
        }
        Ok(self.push(out, r, w, Op::SliceCols { a, start, end }))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(CoreError::ShapeMismatch {
                context: "reshape element count",
                left: vec![r, c],
                right: vec![rows, cols],
            });
        }
        let out = self.nodes[a].value.clone();
        Ok(self.push(out, rows, cols, Op::Reshape { a }))
    }

    /// Clamp to [0, 1]; gradient passes only through the interior.
    pub fn clamp_unit(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        self.push(out, r, c, Op::ClampUnit { a })
    }

    /// Splits a flattened h*w*c image into non-overlapping p*p patches,
    /// one patch per row, channels fastest.
    pub fn unfold(&mut self, a: NodeId, h: usize, w: usize, c: usize, p: usize) -> Result<NodeId> {
        let (r, cols) = self.dims(a);
        if r != 1 || cols != h * w * c || h % p != 0 || w % p != 0 {
            return Err(CoreError::ShapeMismatch {
                context: "unfold image extents",
                left: vec![r, cols],
                right: vec![h, w, c, p],
            });
        }
        let patches = (h / p) * (w / p);
        let pd = p * p * c;
        let v = &self.nodes[a].value;
        let mut out = vec![0.0; patches * pd];
        for (row, col, src) in unfold_index_map(h, w, c, p) {
            out[row * pd + col] = v[src];
        }
        Ok(self.push(out, patches, pd, Op::Unfold { a, h, w, c, p }))
    }

    /// (r, c) -> (r, c*k), each element repeated k times.
    pub fn repeat_interleave(&mut self, a: NodeId, k: usize) -> NodeId {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * c * k);
        for &x in &self.nodes[a].value {
            for _ in 0..k {
                out.push(x);
            }
        }
        self.push(out, r, c * k, Op::RepeatInterleave { a, k })
    }

    // ── backward ────────────────────────────────────────────────────

    pub fn zero_grads(&mut self) {
        for node in self.nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Propagates adjoints from a scalar root. Accumulators must be zero on
    /// entry (fresh tape or after [`Tape::zero_grads`]); running it twice from
    /// the same state reproduces identical gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root].value.len() != 1 {
            return Err(CoreError::Contract(
                "backward root must be a scalar (1x1) node",
            ));
        }
        self.nodes[root].grad[0] += 1.0;
        for id in (0..=root).rev() {
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = self.dims(a);
                    let n = self.dims(b).1;
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    let da = matmul_nt(&g, &self.nodes[b].value, m, n, k);
                    let db = matmul_tn(&self.nodes[a].value, &g, m, k, n);
                    self.nodes[id].grad = g;
                    accumulate(&mut self.nodes[a].grad, &da);
                    accumulate(&mut self.nodes[b].grad, &db);
                }
                Op::Transpose { a } => {
                    let (r, c) = self.dims(a);
                    let g = &self.nodes[id].grad;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(&mut self.nodes[a].grad, &da);
                }
                Op::Add { a, b } => {
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    accumulate(&mut self.nodes[a].grad, &g);
                    accumulate(&mut self.nodes[b].grad, &g);
                    self.nodes[id].grad = g;
                }
                Op::Sub { a, b } => {
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    accumulate(&mut self.nodes[a].grad, &g);
                    for (dst, &gv) in self.nodes[b].grad.iter_mut().zip(&g) {
                        *dst -= gv;
                    }
                    self.nodes[id].grad = g;
                }
                Op::MulElem { a, b } => {
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b].value)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].value)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    accumulate(&mut self.nodes[a].grad, &da);
                    accumulate(&mut self.nodes[b].grad, &db);
                    self.nodes[id].grad = g;
                }
                Op::AffineScalar { a, alpha, .. } => {
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    for (dst, &gv) in self.nodes[a].grad.iter_mut().zip(&g) {
                        *dst += alpha * gv;
                    }
                    self.nodes[id].grad = g;
                }
                Op::AddRowBroadcast { a, bias } => {
                    let c = self.dims(a).1;
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    accumulate(&mut self.nodes[a].grad, &g);
                    for row in g.chunks(c) {
                        for (dst, &gv) in self.nodes[bias].grad.iter_mut().zip(row) {
                            *dst += gv;
                        }
                    }
                    self.nodes[id].grad = g;
                }
                Op::Gelu { a } => {
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].value)
                        .map(|(&gv, &x)| {
                            let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
                            let pdf = INV_SQRT_2PI * exp(-0.5 * x * x);
                            gv * (cdf + x * pdf)
                        })
                        .collect();
                    accumulate(&mut self.nodes[a].grad, &da);
                    self.nodes[id].grad = g;
                }
                Op::Sigmoid { a } => {
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[id].value)
                        .map(|(&gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    accumulate(&mut self.nodes[a].grad, &da);
                    self.nodes[id].grad = g;
                }
                Op::LayerNorm { a, gamma, beta } => {
                    let (r, c) = self.dims(a);
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    let mut da = vec![0.0; r * c];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    {
                        let av = &self.nodes[a].value;
                        let gam = &self.nodes[gamma].value;
                        for i in 0..r {
                            let row = &av[i * c..(i + 1) * c];
                            let (mean, var) = mean_var(row);
                            let inv = 1.0 / sqrt(var + LN_EPS);
                            let grow = &g[i * c..(i + 1) * c];
                            let mut gy_mean = 0.0;
                            let mut gyx_mean = 0.0;
                            for j in 0..c {
                                let xh = (row[j] - mean) * inv;
                                let gy = grow[j] * gam[j];
                                gy_mean += gy;
                                gyx_mean += gy * xh;
                            }
                            gy_mean /= c as f64;
                            gyx_mean /= c as f64;
                            for j in 0..c {
                                let xh = (row[j] - mean) * inv;
                                let gy = grow[j] * gam[j];
                                da[i * c + j] = inv * (gy - gy_mean - xh * gyx_mean);
                                dgamma[j] += grow[j] * xh;
                                dbeta[j] += grow[j];
                            }
                        }
                    }
                    accumulate(&mut self.nodes[a].grad, &da);
                    accumulate(&mut self.nodes[gamma].grad, &dgamma);
                    accumulate(&mut self.nodes[beta].grad, &dbeta);
                    self.nodes[id].grad = g;
                }
                Op::SoftmaxRows { a } => {
                    let (r, c) = self.dims(a);
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let s = &self.nodes[id].value[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = s.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        for j in 0..c {
                            da[i * c + j] = s[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut self.nodes[a].grad, &da);
                    self.nodes[id].grad = g;
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let (r, k) = self.dims(logits);
                    let scale = self.nodes[id].grad[0] / r as f64;
                    let mut dl = vec![0.0; r * k];
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &self.nodes[logits].value[i * k..(i + 1) * k];
                        softmax_into(row, &mut dl[i * k..(i + 1) * k]);
                        dl[i * k + label] -= 1.0;
                        for v in dl[i * k..(i + 1) * k].iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut self.nodes[logits].grad, &dl);
                }
                Op::MeanPoolRows { a } => {
                    let (r, c) = self.dims(a);
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            self.nodes[a].grad[i * c + j] += g[j] * inv;
                        }
                    }
                    self.nodes[id].grad = g;
                }
                Op::SumAll { a } => {
                    let g = self.nodes[id].grad[0];
                    for dst in self.nodes[a].grad.iter_mut() {
                        *dst += g;
                    }
                }
                Op::ConcatRows { parts } => {
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    let mut offset = 0;
                    for &p in &parts {
                        let len = self.nodes[p].value.len();
                        accumulate(&mut self.nodes[p].grad, &g[offset..offset + len]);
                        offset += len;
                    }
                    self.nodes[id].grad = g;
                }
                Op::ConcatCols { parts } => {
                    let (r, cols) = self.dims(id);
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    let mut offset = 0;
                    for &p in &parts {
                        let pc = self.dims(p).1;
                        for i in 0..r {
                            for j in 0..pc {
                                self.nodes[p].grad[i * pc + j] += g[i * cols + offset + j];
                            }
                        }
                        offset += pc;
                    }
                    self.nodes[id].grad = g;
                }
                Op::SliceRows { a, start, .. } => {
                    let c = self.dims(a).1;
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    accumulate(&mut self.nodes[a].grad[start * c..start * c + g.len()], &g);
                    self.nodes[id].grad = g;
                }
                Op::SliceCols { a, start, end } => {
                    let (r, c) = self.dims(a);
                    let w = end - start;
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    for i in 0..r {
                        for j in 0..w {
                            self.nodes[a].grad[i * c + start + j] += g[i * w + j];
                        }
                    }
                    self.nodes[id].grad = g;
                }
                Op::Reshape { a } => {
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    accumulate(&mut self.nodes[a].grad, &g);
                    self.nodes[id].grad = g;
                }
                Op::ClampUnit { a } => {
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].value)
                        .map(|(&gv, &x)| if x > 0.0 && x < 1.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut self.nodes[a].grad, &da);
                    self.nodes[id].grad = g;
                }
                Op::Unfold { a, h, w, c, p } => {
                    let pd = p * p * c;
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    for (row, col, src) in unfold_index_map(h, w, c, p) {
                        self.nodes[a].grad[src] += g[row * pd + col];
                    }
                    self.nodes[id].grad = g;
                }
                Op::RepeatInterleave { a, k } => {
                    let g = core::mem::take(&mut self.nodes[id].grad);
                    for (i, chunk) in g.chunks(k).enumerate() {
                        self.nodes[a].grad[i] += chunk.iter().sum::<f64>();
                    }
                    self.nodes[id].grad = g;
                }
            }
        }
        Ok(())
    }
}

// ── kernels ─────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] * B[k,n], k unrolled by 4 to cut C-row traffic.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let k4 = k - k % 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut t = 0;
        while t < k4 {
            let (a0, a1, a2, a3) = (arow[t], arow[t + 1], arow[t + 2], arow[t + 3]);
            let b0 = &b[t * n..(t + 1) * n];
            let b1 = &b[(t + 1) * n..(t + 2) * n];
            let b2 = &b[(t + 2) * n..(t + 3) * n];
            let b3 = &b[(t + 3) * n..(t + 4) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            t += 4;
        }
        for (t, &av) in arow.iter().enumerate().skip(k4) {
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] * B[k,n]^T  (both operands row-major, inner dim n)
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + t] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n], m unrolled by 4 to cut C-row traffic.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    let m4 = m - m % 4;
    let mut i = 0;
    while i < m4 {
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for t in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + t],
                a[(i + 1) * k + t],
                a[(i + 2) * k + t],
                a[(i + 3) * k + t],
            );
            let crow = &mut c[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let crow = &mut c[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
        i += 1;
    }
    c
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = exp(x - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// log softmax(row)[index], computed with max subtraction.
fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let sum: f64 = row.iter().map(|&x| exp(x - max)).sum();
    row[index] - max - log(sum)
}

/// (patch row, within-patch col, flat source index) triples, fixed order.
fn unfold_index_map(
    h: usize,
    w: usize,
    c: usize,
    p: usize,
) -> impl Iterator<Item = (usize, usize, usize)> {
    let px = w / p;
    (0..(h / p) * px).flat_map(move |patch| {
        let (py, pxi) = (patch / px, patch % px);
        (0..p * p * c).map(move |col| {
            let dy = col / (p * c);
            let rem = col % (p * c);
            let dx = rem / c;
            let ch = rem % c;
            let src = ((py * p + dy) * w + (pxi * p + dx)) * c + ch;
            (patch, col, src)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    fn random_leaf(tape: &mut Tape, rng: &mut Rng64, r: usize, c: usize) -> NodeId {
        let data: Vec<f64> = (0..r * c).map(|_| rng.normal()).collect();
        tape.leaf(r, c, data)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = t.leaf(2, 1, vec![3.0, 4.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_by_hand() {
        let mut t = Tape::new();
        let a = t.leaf(1, 2, vec![1.0, 2.0]);
        let b = t.leaf(2, 1, vec![3.0, 4.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(2, 3, vec![0.0; 6]);
        let b = t.leaf(2, 2, vec![0.0; 4]);
        match t.matmul(a, b).unwrap_err() {
            CoreError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng64::new(17);
        let mut t = Tape::new();
        let a = random_leaf(&mut t, &mut rng, 3, 4);
        let b = random_leaf(&mut t, &mut rng, 4, 2);
        let c = t.matmul(a, b).unwrap();
        // naive triple loop, written independently of the kernel
        let (av, bv) = (t.value(a).to_vec(), t.value(b).to_vec());
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0f64;
                for p in 0..4 {
                    s += av[i * 4 + p] * bv[p * 2 + j];
                }
                assert!((t.value(c)[i * 2 + j] - s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_overflow() {
        let mut t = Tape::new();
        let a = t.leaf(1, 3, vec![0.0, 0.0, 0.0]);
        let s = t.softmax_rows(a);
        for &v in t.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let b = t.leaf(1, 2, vec![1000.0, 0.0]);
        let s2 = t.softmax_rows(b);
        assert!(t.value(s2).iter().all(|v| v.is_finite()));
        assert!((t.value(s2)[0] - 1.0).abs() < 1e-12);
        assert!(t.value(s2)[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_exp_sum_oracle() {
        let mut rng = Rng64::new(5);
        for _ in 0..10 {
            let mut t = Tape::new();
            let a = random_leaf(&mut t, &mut rng, 1, 7);
            let s = t.softmax_rows(a);
            let row = t.value(a).to_vec();
            let exps: Vec<f64> = row.iter().map(|&x| libm::exp(x)).collect();
            let total: f64 = exps.iter().sum();
            let sum_out: f64 = t.value(s).iter().sum();
            assert!((sum_out - 1.0).abs() < 1e-6);
            for (got, want) in t.value(s).iter().zip(exps.iter().map(|e| e / total)) {
                assert!((got - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut t = Tape::new();
        let logits = t.leaf(1, 10, vec![0.0; 10]);
        let l = t.cross_entropy_mean(logits, &[3]).unwrap();
        assert!((t.scalar(l) - libm::log(10.0)).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_saturated_is_near_zero() {
        let mut t = Tape::new();
        let mut row = vec![0.0; 10];
        row[4] = 20.0;
        let logits = t.leaf(1, 10, row);
        let l = t.cross_entropy_mean(logits, &[4]).unwrap();
        assert!(t.scalar(l) < 1e-6);
        assert!(t.scalar(l) >= 0.0);
    }

    #[test]
    fn cross_entropy_matches_composition_oracle() {
        let mut rng = Rng64::new(23);
        for _ in 0..10 {
            let mut t = Tape::new();
            let logits = random_leaf(&mut t, &mut rng, 1, 6);
            let label = rng.below(6);
            let l = t.cross_entropy_mean(logits, &[label]).unwrap();
            let row = t.value(logits).to_vec();
            let exps: Vec<f64> = row.iter().map(|&x| libm::exp(x)).collect();
            let total: f64 = exps.iter().sum();
            let want = -libm::log(exps[label] / total);
            assert!((t.scalar(l) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = Tape::new();
        let logits = t.leaf(1, 4, vec![0.0; 4]);
        match t.cross_entropy_mean(logits, &[4]).unwrap_err() {
            CoreError::IndexOutOfRange { index, bound, .. } => {
                assert_eq!((index, bound), (4, 4));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn backward_square() {
        let mut t = Tape::new();
        let x = t.leaf(1, 1, vec![3.0]);
        let y = t.mul_elem(x, x).unwrap();
        t.backward(y).unwrap();
        assert!((t.grad(x)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_softmax_sum_is_constant() {
        let mut t = Tape::new();
        let x = t.leaf(1, 5, vec![0.3, -1.2, 0.7, 2.0, -0.5]);
        let s = t.softmax_rows(x);
        let total = t.sum_all(s);
        t.backward(total).unwrap();
        for &g in t.grad(x) {
            assert!(g.abs() < 1e-12, "gradient of a constant: {g}");
        }
    }

    #[test]
    fn backward_rerun_after_zeroing_is_identical() {
        let mut rng = Rng64::new(9);
        let mut t = Tape::new();
        let a = random_leaf(&mut t, &mut rng, 3, 4);
        let b = random_leaf(&mut t, &mut rng, 4, 2);
        let c = t.matmul(a, b).unwrap();
        let g = t.gelu(c);
        let s = t.sum_all(g);
        t.backward(s).unwrap();
        let first = t.grad(a).to_vec();
        t.zero_grads();
        t.backward(s).unwrap();
        assert_eq!(first, t.grad(a));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let a = t.leaf(1, 3, vec![1.0, 2.0, 3.0]);
        match t.backward(a).unwrap_err() {
            CoreError::Contract(_) => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unfold_is_a_permutation() {
        let mut t = Tape::new();
        let img: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let a = t.leaf(1, 16, img.clone());
        let u = t.unfold(a, 4, 4, 1, 2).unwrap();
        assert_eq!(t.dims(u), (4, 4));
        // patch (0,0) holds pixels (0,0),(0,1),(1,0),(1,1) = 0,1,4,5
        assert_eq!(&t.value(u)[0..4], &[0.0, 1.0, 4.0, 5.0]);
        let mut seen: Vec<f64> = t.value(u).to_vec();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, img);
    }

    #[test]
    fn clamp_unit_forward_and_gradient_mask() {
        let mut t = Tape::new();
        let a = t.leaf(1, 3, vec![-0.5, 0.5, 1.5]);
        let y = t.clamp_unit(a);
        assert_eq!(t.value(y), &[0.0, 0.5, 1.0]);
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = Rng64::new(77);
            let mut t = Tape::new();
            let a = random_leaf(&mut t, &mut rng, 4, 4);
            let g = t.leaf(1, 4, vec![1.0; 4]);
            let b = t.leaf(1, 4, vec![0.0; 4]);
            let ln = t.layer_norm(a, g, b).unwrap();
            let sm = t.softmax_rows(ln);
            let s = t.sum_all(sm);
            t.scalar(s).to_bits()
        };
        assert_eq!(run(), run());
    }
}
