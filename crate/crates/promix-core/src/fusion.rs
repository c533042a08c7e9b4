//! Gated fusion of a composed prompt with a task embedding.
//!
//! The gate `g = sigmoid(e_t W_g)` is a per-coordinate mixing weight:
//! `fused[s, j] = g[j] * composed[s, j] + (1 - g[j]) * e_t[j]`. The same
//! gate row applies to every prompt slot, and the task embedding is
//! broadcast across slots. With `W_g` at zero the gate is exactly 0.5
//! everywhere, so training starts from an even blend.

use alloc::format;
use alloc::vec::Vec;

use crate::math;
use crate::rng::Rng;
use crate::scheduler::ComposedPrompt;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// One learned embedding per task, aligned with a task-id list kept by the
/// caller. Rows draw from per-task streams ("param.temb.{id}"), so a task's
/// embedding is the same in every run with the same seed regardless of
/// which other tasks participate.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbeddingTable {
    pub dim: usize,
    rows: Vec<Tensor>,
}

impl TaskEmbeddingTable {
    pub fn init(task_ids: &[usize], dim: usize, seed: u64) -> Self {
        let mut table = TaskEmbeddingTable {
            dim,
            rows: Vec::with_capacity(task_ids.len()),
        };
        for &id in task_ids {
            table.push_row(id, seed);
        }
        table
    }

    pub fn push_row(&mut self, task_id: usize, seed: u64) {
        let mut row = Tensor::zeros(alloc::vec![self.dim]);
        let std = 1.0 / math::sqrt(self.dim as f64);
        let mut rng = Rng::derive(seed, &format!("param.temb.{task_id}"), 0);
        rng.fill_normal(&mut row.data, std);
        self.rows.push(row);
    }

    pub fn row(&self, pos: usize) -> &Tensor {
        &self.rows[pos]
    }

    pub fn row_mut(&mut self, pos: usize) -> &mut Tensor {
        &mut self.rows[pos]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Fusion result plus the gate that produced it, for reports and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrompt {
    pub values: Tensor,
    pub gate: Vec<f64>,
}

impl FusedPrompt {
    pub fn mean_gate(&self) -> f64 {
        self.gate.iter().sum::<f64>() / self.gate.len() as f64
    }
}

/// `sigmoid(e W_g)` with `W_g` a (dim x dim) matrix in row-vector
/// convention.
pub fn gate_vector(w_g: &Tensor, e: &[f64]) -> Vec<f64> {
    assert_eq!(
        w_g.shape,
        alloc::vec![e.len(), e.len()],
        "gate_vector: W_g shape {:?} does not match embedding length {}",
        w_g.shape,
        e.len()
    );
    let d = e.len();
    let mut g = Vec::with_capacity(d);
    for j in 0..d {
        let mut s = 0.0;
        for i in 0..d {
            s += e[i] * w_g.data[i * d + j];
        }
        g.push(math::sigmoid(s));
    }
    g
}

pub fn fuse(gate: &[f64], composed: &ComposedPrompt, e: &[f64]) -> FusedPrompt {
    assert_eq!(
        gate.len(),
        composed.dim,
        "fuse: gate length {} does not match prompt dim {}",
        gate.len(),
        composed.dim
    );
    assert_eq!(
        e.len(),
        composed.dim,
        "fuse: embedding length {} does not match prompt dim {}",
        e.len(),
        composed.dim
    );
    let (slots, dim) = (composed.slots, composed.dim);
    let mut out = Tensor::zeros(alloc::vec![slots, dim]);
    for s in 0..slots {
        for j in 0..dim {
            let c = composed.values.data[s * dim + j];
            out.data[s * dim + j] = gate[j] * c + (1.0 - gate[j]) * e[j];
        }
    }
    FusedPrompt {
        values: out,
        gate: gate.to_vec(),
    }
}

/// Tape twin of `gate_vector`. `e` is a rank-1 node of length dim, `w_g` a
/// (dim x dim) node.
pub fn gate_node(tape: &mut Tape, e: NodeId, w_g: NodeId) -> NodeId {
    let pre = tape.matmul(e, w_g);
    tape.sigmoid(pre)
}

/// Tape twin of `fuse`; yields a (slots x dim) node.
pub fn fuse_node(tape: &mut Tape, gate: NodeId, composed: NodeId, e: NodeId) -> NodeId {
    let gated_prompt = tape.mul(composed, gate);
    let neg_gate = tape.scale(gate, -1.0);
    let one_minus = tape.add_scalar(neg_gate, 1.0);
    let gated_embed = tape.mul(e, one_minus);
    tape.add(gated_prompt, gated_embed)
}
