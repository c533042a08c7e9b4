//! Reverse-mode autodiff over a Wengert tape.
//!
//! Each forward primitive pushes one node holding the operation, its input
//! ids and the computed value. `backward` walks the tape once in reverse and
//! accumulates gradients into per-node buffers. Node ids are indices into
//! the tape, so inputs always precede consumers and a single reverse sweep
//! is a valid topological order.
//!
//! Shape errors are programmer errors: every primitive asserts its input
//! shapes and panics with a message naming the primitive and the offending
//! shapes. Data-dependent failures do not exist at this layer.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{matmul, matmul_nt, matmul_tn, numel, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { constant: bool },
    /// Elementwise a + b; b may be a last-axis vector broadcast across rows.
    Add { a: NodeId, b: NodeId },
    /// Elementwise a * b; b may be a last-axis vector broadcast across rows.
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId, c: f64 },
    /// (m x k) * (k x n).
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    /// (m x k) * (n x k)^T, i.e. rows of b act as columns.
    MatmulNT { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    /// Row-wise softmax of a / tau over the last axis.
    SoftmaxTemp { a: NodeId, tau: f64 },
    /// Row-wise standardization over the last axis, no affine part.
    LayerNorm { a: NodeId, eps: f64 },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    /// Row lookup; duplicate indices scatter-add in the backward pass.
    GatherRows { a: NodeId, rows: Vec<usize> },
    MeanRows { a: NodeId },
    SumAll { a: NodeId },
    Reshape { a: NodeId },
    /// Fixed-coefficient linear combination of same-shape nodes.
    LinComb { parts: Vec<NodeId>, coeffs: Vec<f64> },
    /// Mean cross-entropy of logit rows against integer labels.
    CrossEntropyMean { logits: NodeId, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    shape: Vec<usize>,
}

impl Node {
    fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf { .. })
    }

    fn is_constant(&self) -> bool {
        matches!(self.op, Op::Leaf { constant: true })
    }

    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }

    fn cols(&self) -> usize {
        *self.shape.last().expect("node: empty shape")
    }
}

/// Gradients produced by one backward sweep, indexed by node id.
/// `None` means no gradient flowed there (or the node is a constant).
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient of a node that must be on the differentiation path.
    pub fn expect(&self, id: NodeId) -> &[f64] {
        self.get(id)
            .expect("gradients: no gradient recorded for node")
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        assert_eq!(
            self.nodes[id].value.len(),
            1,
            "scalar_value: node has shape {:?}",
            self.nodes[id].shape
        );
        self.nodes[id].value[0]
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push_node(Op::Leaf { constant: false }, t.data.clone(), t.shape.clone())
    }

    /// Input node that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push_node(Op::Leaf { constant: true }, t.data.clone(), t.shape.clone())
    }

    fn push_node(&mut self, op: Op, value: Vec<f64>, shape: Vec<usize>) -> NodeId {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { op, value, shape });
        self.nodes.len() - 1
    }

    fn push(&mut self, op: Op) -> NodeId {
        let (value, shape) = eval_op(&self.nodes, &op);
        self.push_node(op, value, shape)
    }

    fn check_broadcast(&self, name: &str, a: NodeId, b: NodeId) {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        let ok = na.shape == nb.shape || nb.value.len() == na.cols();
        assert!(
            ok,
            "{name}: shapes {:?} and {:?} are neither equal nor row-broadcastable",
            na.shape, nb.shape
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_broadcast("add", a, b);
        self.push(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_broadcast("mul", a, b);
        self.push(Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar { a, c })
    }

    /// Matrix product. Rank-1 lhs is treated as a single row and yields a
    /// rank-1 result; otherwise the result is `[m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        assert!(
            nb.shape.len() == 2,
            "matmul: rhs must be rank 2, got {:?}",
            nb.shape
        );
        let (m, k) = (na.rows(), na.cols());
        let (bk, n) = (nb.shape[0], nb.shape[1]);
        assert_eq!(
            k, bk,
            "matmul: inner dims differ: lhs {:?} rhs {:?}",
            na.shape, nb.shape
        );
        self.push(Op::Matmul { a, b, m, k, n })
    }

    /// Product with the transpose of `b`: `(m x k) * (n x k)^T -> (m x n)`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        assert!(
            na.shape.len() == 2 && nb.shape.len() == 2,
            "matmul_nt: both operands must be rank 2, got {:?} and {:?}",
            na.shape,
            nb.shape
        );
        let (m, k) = (na.shape[0], na.shape[1]);
        let (n, bk) = (nb.shape[0], nb.shape[1]);
        assert_eq!(
            k, bk,
            "matmul_nt: inner dims differ: lhs {:?} rhs {:?}",
            na.shape, nb.shape
        );
        self.push(Op::MatmulNT { a, b, m, k, n })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid { a })
    }

    pub fn softmax_temp(&mut self, a: NodeId, tau: f64) -> NodeId {
        assert!(
            tau > 0.0 && tau.is_finite(),
            "softmax_temp: temperature must be positive and finite, got {tau}"
        );
        self.push(Op::SoftmaxTemp { a, tau })
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        assert!(eps > 0.0, "layer_norm: eps must be positive, got {eps}");
        self.push(Op::LayerNorm { a, eps })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.nodes[parts[0]].cols();
        for &p in parts {
            assert_eq!(
                self.nodes[p].cols(),
                cols,
                "concat_rows: column mismatch: {:?} vs {:?}",
                self.nodes[parts[0]].shape,
                self.nodes[p].shape
            );
        }
        self.push(Op::ConcatRows {
            parts: parts.to_vec(),
        })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let na = &self.nodes[a];
        assert!(
            na.shape.len() == 2,
            "slice_rows: operand must be rank 2, got {:?}",
            na.shape
        );
        assert!(
            start + len <= na.shape[0] && len > 0,
            "slice_rows: range {start}..{} out of {:?}",
            start + len,
            na.shape
        );
        self.push(Op::SliceRows { a, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.nodes[parts[0]].shape[0];
        for &p in parts {
            let np = &self.nodes[p];
            assert!(
                np.shape.len() == 2 && np.shape[0] == rows,
                "concat_cols: row mismatch: {:?} vs {:?}",
                self.nodes[parts[0]].shape,
                np.shape
            );
        }
        self.push(Op::ConcatCols {
            parts: parts.to_vec(),
        })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let na = &self.nodes[a];
        assert!(
            na.shape.len() == 2,
            "slice_cols: operand must be rank 2, got {:?}",
            na.shape
        );
        assert!(
            start + len <= na.shape[1] && len > 0,
            "slice_cols: range {start}..{} out of {:?}",
            start + len,
            na.shape
        );
        self.push(Op::SliceCols { a, start, len })
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let na = &self.nodes[a];
        assert!(
            na.shape.len() == 2,
            "gather_rows: operand must be rank 2, got {:?}",
            na.shape
        );
        for &r in rows {
            assert!(
                r < na.shape[0],
                "gather_rows: row {r} out of {:?}",
                na.shape
            );
        }
        assert!(!rows.is_empty(), "gather_rows: empty row list");
        self.push(Op::GatherRows {
            a,
            rows: rows.to_vec(),
        })
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        assert!(
            self.nodes[a].shape.len() == 2,
            "mean_rows: operand must be rank 2, got {:?}",
            self.nodes[a].shape
        );
        self.push(Op::MeanRows { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(
            numel(&shape),
            self.nodes[a].value.len(),
            "reshape: cannot view {:?} as {:?}",
            self.nodes[a].shape,
            shape
        );
        let value = self.nodes[a].value.clone();
        self.push_node(Op::Reshape { a }, value, shape)
    }

    pub fn lin_comb(&mut self, parts: &[NodeId], coeffs: &[f64]) -> NodeId {
        assert!(!parts.is_empty(), "lin_comb: no parts");
        assert_eq!(
            parts.len(),
            coeffs.len(),
            "lin_comb: {} parts but {} coefficients",
            parts.len(),
            coeffs.len()
        );
        let shape = self.nodes[parts[0]].shape.clone();
        for &p in parts {
            assert_eq!(
                self.nodes[p].shape, shape,
                "lin_comb: shape mismatch: {:?} vs {:?}",
                shape, self.nodes[p].shape
            );
        }
        self.push(Op::LinComb {
            parts: parts.to_vec(),
            coeffs: coeffs.to_vec(),
        })
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let nl = &self.nodes[logits];
        assert!(
            nl.shape.len() == 2,
            "cross_entropy_mean: logits must be rank 2, got {:?}",
            nl.shape
        );
        assert_eq!(
            nl.shape[0],
            labels.len(),
            "cross_entropy_mean: {} logit rows but {} labels",
            nl.shape[0],
            labels.len()
        );
        for &y in labels {
            assert!(
                y < nl.shape[1],
                "cross_entropy_mean: label {y} out of {} classes",
                nl.shape[1]
            );
        }
        self.push(Op::CrossEntropyMean {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Reverse sweep from a scalar root with seed 1. One pass, ids strictly
    /// decreasing, so every node's gradient is complete before it is used.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root].value.len(),
            1,
            "backward: root must be scalar, got shape {:?}",
            self.nodes[root].shape
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
        }
        Gradients { grads }
    }

    /// Accumulates `delta` into the gradient buffer of `target`, unless the
    /// target is a constant.
    fn accum(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, delta: &[f64]) {
        if self.nodes[target].is_constant() {
            return;
        }
        let buf = grads[target]
            .get_or_insert_with(|| vec![0.0; self.nodes[target].value.len()]);
        debug_assert_eq!(buf.len(), delta.len());
        for (b, d) in buf.iter_mut().zip(delta.iter()) {
            *b += d;
        }
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add { a, b } => {
                self.accum(grads, *a, g);
                let nb = &self.nodes[*b];
                if nb.value.len() == g.len() {
                    self.accum(grads, *b, g);
                } else {
                    // b was broadcast across rows: reduce-sum each column.
                    let cols = nb.value.len();
                    let mut db = vec![0.0; cols];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % cols] += gv;
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if vb.len() == va.len() {
                    let da: Vec<f64> = g.iter().zip(vb.iter()).map(|(g, b)| g * b).collect();
                    let db: Vec<f64> = g.iter().zip(va.iter()).map(|(g, a)| g * a).collect();
                    self.accum(grads, *a, &da);
                    self.accum(grads, *b, &db);
                } else {
                    let cols = vb.len();
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * vb[i % cols])
                        .collect();
                    let mut db = vec![0.0; cols];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % cols] += gv * va[i];
                    }
                    self.accum(grads, *a, &da);
                    self.accum(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|g| g * c).collect();
                self.accum(grads, *a, &da);
            }
            Op::AddScalar { a, .. } => {
                self.accum(grads, *a, g);
            }
            Op::Matmul { a, b, m, k, n } => {
                // C = A B: dA = dC B^T, dB = A^T dC.
                let da = matmul_nt(g, &self.nodes[*b].value, *m, *n, *k);
                let db = matmul_tn(&self.nodes[*a].value, g, *m, *k, *n);
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::MatmulNT { a, b, m, k, n } => {
                // C = A B^T: dA = dC B, dB = dC^T A.
                let da = matmul(g, &self.nodes[*b].value, *m, *n, *k);
                let db = matmul_tn(g, &self.nodes[*a].value, *m, *n, *k);
                self.accum(grads, *a, &da);
                self.accum(grads, *b, &db);
            }
            Op::Relu { a } => {
                let va = &self.nodes[*a].value;
                let da: Vec<f64> = g
                    .iter()
                    .zip(va.iter())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::Sigmoid { a } => {
                let y = &node.value;
                let da: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::SoftmaxTemp { a, tau } => {
                let y = &node.value;
                let cols = node.cols();
                let mut da = vec![0.0; y.len()];
                for r in 0..node.rows() {
                    let row = r * cols;
                    let mut inner = 0.0;
                    for j in 0..cols {
                        inner += g[row + j] * y[row + j];
                    }
                    for j in 0..cols {
                        da[row + j] = y[row + j] * (g[row + j] - inner) / tau;
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::LayerNorm { a, eps } => {
                let va = &self.nodes[*a].value;
                let y = &node.value;
                let cols = node.cols();
                let inv_n = 1.0 / cols as f64;
                let mut da = vec![0.0; va.len()];
                for r in 0..node.rows() {
                    let row = r * cols;
                    let mut mean = 0.0;
                    let mut sq = 0.0;
                    for j in 0..cols {
                        mean += va[row + j];
                    }
                    mean *= inv_n;
                    for j in 0..cols {
                        let d = va[row + j] - mean;
                        sq += d * d;
                    }
                    let inv_std = 1.0 / math::sqrt(sq * inv_n + eps);
                    let mut g_mean = 0.0;
                    let mut gy_mean = 0.0;
                    for j in 0..cols {
                        g_mean += g[row + j];
                        gy_mean += g[row + j] * y[row + j];
                    }
                    g_mean *= inv_n;
                    gy_mean *= inv_n;
                    for j in 0..cols {
                        da[row + j] =
                            inv_std * (g[row + j] - g_mean - y[row + j] * gy_mean);
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.accum(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceRows { a, start, .. } => {
                let cols = self.nodes[*a].cols();
                let mut da = vec![0.0; self.nodes[*a].value.len()];
                da[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.accum(grads, *a, &da);
            }
            Op::ConcatCols { parts } => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].shape[1];
                    let mut dp = vec![0.0; rows * pc];
                    for r in 0..rows {
                        dp[r * pc..(r + 1) * pc]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + pc]);
                    }
                    self.accum(grads, p, &dp);
                    offset += pc;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (rows, cols) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accum(grads, *a, &da);
            }
            Op::GatherRows { a, rows } => {
                let cols = self.nodes[*a].cols();
                let mut da = vec![0.0; self.nodes[*a].value.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        da[r * cols + j] += g[i * cols + j];
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::MeanRows { a } => {
                let na = &self.nodes[*a];
                let (rows, cols) = (na.shape[0], na.shape[1]);
                let inv = 1.0 / rows as f64;
                let mut da = vec![0.0; na.value.len()];
                for r in 0..rows {
                    for j in 0..cols {
                        da[r * cols + j] = g[j] * inv;
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[*a].value.len()];
                self.accum(grads, *a, &da);
            }
            Op::Reshape { a } => {
                self.accum(grads, *a, g);
            }
            Op::LinComb { parts, coeffs } => {
                for (&p, &c) in parts.iter().zip(coeffs.iter()) {
                    let dp: Vec<f64> = g.iter().map(|g| g * c).collect();
                    self.accum(grads, p, &dp);
                }
            }
            Op::CrossEntropyMean { logits, labels } => {
                // dL/dlogits = (softmax - onehot) / batch, scaled by g.
                let vl = &self.nodes[*logits].value;
                let classes = self.nodes[*logits].shape[1];
                let batch = labels.len();
                let scale = g[0] / batch as f64;
                let mut da = vec![0.0; vl.len()];
                for (b, &y) in labels.iter().enumerate() {
                    let row = b * classes;
                    let probs = softmax_row(&vl[row..row + classes], 1.0);
                    for c in 0..classes {
                        let indicator = if c == y { 1.0 } else { 0.0 };
                        da[row + c] = scale * (probs[c] - indicator);
                    }
                }
                self.accum(grads, *logits, &da);
            }
        }
    }

    /// Recomputes every non-leaf node from its stored inputs and returns the
    /// largest absolute deviation from the recorded values. A correct tape
    /// replays to exactly 0.0: forward evaluation is deterministic.
    pub fn replay_max_abs_diff(&self) -> f64 {
        let mut worst = 0.0f64;
        for node in self.nodes.iter().filter(|n| !n.is_leaf()) {
            let (value, shape) = eval_op(&self.nodes, &node.op);
            // Reshape reports no shape of its own; its target lives on the node.
            debug_assert!(shape.is_empty() || shape == node.shape);
            for (a, b) in value.iter().zip(node.value.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

fn softmax_row(x: &[f64], tau: f64) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        m = m.max(v);
    }
    let mut out: Vec<f64> = x.iter().map(|&v| math::exp((v - m) / tau)).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Forward evaluation shared by node construction and replay. Reshape is
/// value-preserving and handled at push time, so its recompute is a copy.
fn eval_op(nodes: &[Node], op: &Op) -> (Vec<f64>, Vec<usize>) {
    match op {
        Op::Leaf { .. } => unreachable!("eval_op: leaves carry their own values"),
        Op::Add { a, b } => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let mut out = na.value.clone();
            if nb.value.len() == out.len() {
                for (o, v) in out.iter_mut().zip(nb.value.iter()) {
                    *o += v;
                }
            } else {
                let cols = nb.value.len();
                for (i, o) in out.iter_mut().enumerate() {
                    *o += nb.value[i % cols];
                }
            }
            (out, na.shape.clone())
        }
        Op::Mul { a, b } => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let mut out = na.value.clone();
            if nb.value.len() == out.len() {
                for (o, v) in out.iter_mut().zip(nb.value.iter()) {
                    *o *= v;
                }
            } else {
                let cols = nb.value.len();
                for (i, o) in out.iter_mut().enumerate() {
                    *o *= nb.value[i % cols];
                }
            }
            (out, na.shape.clone())
        }
        Op::Scale { a, c } => {
            let na = &nodes[*a];
            (na.value.iter().map(|v| v * c).collect(), na.shape.clone())
        }
        Op::AddScalar { a, c } => {
            let na = &nodes[*a];
            (na.value.iter().map(|v| v + c).collect(), na.shape.clone())
        }
        Op::Matmul { a, b, m, k, n } => {
            let out = matmul(&nodes[*a].value, &nodes[*b].value, *m, *k, *n);
            let shape = if nodes[*a].shape.len() == 1 {
                vec![*n]
            } else {
                vec![*m, *n]
            };
            (out, shape)
        }
        Op::MatmulNT { a, b, m, k, n } => {
            let out = matmul_nt(&nodes[*a].value, &nodes[*b].value, *m, *k, *n);
            (out, vec![*m, *n])
        }
        Op::Relu { a } => {
            let na = &nodes[*a];
            (
                na.value.iter().map(|v| v.max(0.0)).collect(),
                na.shape.clone(),
            )
        }
        Op::Sigmoid { a } => {
            let na = &nodes[*a];
            (
                na.value.iter().map(|v| math::sigmoid(*v)).collect(),
                na.shape.clone(),
            )
        }
        Op::SoftmaxTemp { a, tau } => {
            let na = &nodes[*a];
            let cols = na.cols();
            let mut out = Vec::with_capacity(na.value.len());
            for r in 0..na.rows() {
                out.extend_from_slice(&softmax_row(&na.value[r * cols..(r + 1) * cols], *tau));
            }
            (out, na.shape.clone())
        }
        Op::LayerNorm { a, eps } => {
            let na = &nodes[*a];
            let cols = na.cols();
            let inv_n = 1.0 / cols as f64;
            let mut out = vec![0.0; na.value.len()];
            for r in 0..na.rows() {
                let row = &na.value[r * cols..(r + 1) * cols];
                let mean: f64 = row.iter().sum::<f64>() * inv_n;
                let var: f64 =
                    row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_n;
                let inv_std = 1.0 / math::sqrt(var + eps);
                for j in 0..cols {
                    out[r * cols + j] = (row[j] - mean) * inv_std;
                }
            }
            (out, na.shape.clone())
        }
        Op::ConcatRows { parts } => {
            let cols = nodes[parts[0]].cols();
            let mut out = Vec::new();
            for &p in parts {
                out.extend_from_slice(&nodes[p].value);
            }
            let rows = out.len() / cols;
            (out, vec![rows, cols])
        }
        Op::SliceRows { a, start, len } => {
            let na = &nodes[*a];
            let cols = na.cols();
            (
                na.value[start * cols..(start + len) * cols].to_vec(),
                vec![*len, cols],
            )
        }
        Op::ConcatCols { parts } => {
            let rows = nodes[parts[0]].shape[0];
            let total: usize = parts.iter().map(|&p| nodes[p].shape[1]).sum();
            let mut out = vec![0.0; rows * total];
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].shape[1];
                for r in 0..rows {
                    out[r * total + offset..r * total + offset + pc]
                        .copy_from_slice(&nodes[p].value[r * pc..(r + 1) * pc]);
                }
                offset += pc;
            }
            (out, vec![rows, total])
        }
        Op::SliceCols { a, start, len } => {
            let na = &nodes[*a];
            let (rows, cols) = (na.shape[0], na.shape[1]);
            let mut out = vec![0.0; rows * len];
            for r in 0..rows {
                out[r * len..(r + 1) * len]
                    .copy_from_slice(&na.value[r * cols + start..r * cols + start + len]);
            }
            (out, vec![rows, *len])
        }
        Op::GatherRows { a, rows } => {
            let na = &nodes[*a];
            let cols = na.cols();
            let mut out = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                out.extend_from_slice(&na.value[r * cols..(r + 1) * cols]);
            }
            (out, vec![rows.len(), cols])
        }
        Op::MeanRows { a } => {
            let na = &nodes[*a];
            let (rows, cols) = (na.shape[0], na.shape[1]);
            let inv = 1.0 / rows as f64;
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for j in 0..cols {
                    out[j] += na.value[r * cols + j];
                }
            }
            for v in out.iter_mut() {
                *v *= inv;
            }
            (out, vec![cols])
        }
        Op::SumAll { a } => {
            let s: f64 = nodes[*a].value.iter().sum();
            (vec![s], vec![1])
        }
        Op::Reshape { a } => (nodes[*a].value.clone(), Vec::new()),
        Op::LinComb { parts, coeffs } => {
            let mut out = vec![0.0; nodes[parts[0]].value.len()];
            for (&p, &c) in parts.iter().zip(coeffs.iter()) {
                for (o, v) in out.iter_mut().zip(nodes[p].value.iter()) {
                    *o += c * v;
                }
            }
            (out, nodes[parts[0]].shape.clone())
        }
        Op::CrossEntropyMean { logits, labels } => {
            let nl = &nodes[*logits];
            let classes = nl.shape[1];
            let mut total = 0.0;
            for (b, &y) in labels.iter().enumerate() {
                let row = &nl.value[b * classes..(b + 1) * classes];
                let mut m = f64::NEG_INFINITY;
                for &v in row {
                    m = m.max(v);
                }
                let mut lse = 0.0;
                for &v in row {
                    lse += math::exp(v - m);
                }
                total += m + math::ln(lse) - row[y];
            }
            (vec![total / labels.len() as f64], vec![1])
        }
    }
}
