//! Micro transformer with prompt injection.
//!
//! Forward path for one task batch: schedule weights from the task's
//! logits, compose the pool, fuse with the task embedding, prepend the
//! fused slots to the token embeddings, run post-norm transformer blocks,
//! mean-pool and classify through the task head. The whole computation is
//! recorded on a `Tape`, so one `backward` call yields every parameter
//! gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::fusion::{fuse_node, gate_node};
use crate::params::ModelState;
use crate::scheduler::{compose_prompt_node, schedule_weights_node};
use crate::tape::{NodeId, Tape};
use crate::tasks::Example;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// FFN hidden width as a multiple of `dim`.
    pub ffn_mult: usize,
    /// Maximum token positions, prompt slots excluded.
    pub max_len: usize,
    /// Prompt slots prepended to every sequence.
    pub prompt_slots: usize,
    pub use_positions: bool,
    /// Whether mean pooling covers the prompt slots or only token positions.
    pub pool_includes_prompt: bool,
    pub ln_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults sized for single-core experiments.
    pub fn default_desk() -> Self {
        EncoderConfig {
            vocab_size: 64,
            dim: 16,
            n_layers: 1,
            n_heads: 4,
            ffn_mult: 2,
            max_len: 40,
            prompt_slots: 2,
            use_positions: true,
            pool_includes_prompt: true,
            ln_eps: 1e-5,
        }
    }

    /// Small configuration for fast unit tests and gradient checks.
    pub fn tiny_for_tests() -> Self {
        EncoderConfig {
            vocab_size: 20,
            dim: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            max_len: 24,
            prompt_slots: 2,
            use_positions: true,
            pool_includes_prompt: true,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems: Vec<String> = Vec::new();
        if self.vocab_size == 0 {
            problems.push(String::from("model.vocab_size must be positive"));
        }
        if self.dim == 0 {
            problems.push(String::from("model.dim must be positive"));
        }
        if self.n_heads == 0 {
            problems.push(String::from("model.n_heads must be positive"));
        } else if self.dim % self.n_heads != 0 {
            problems.push(format!(
                "model.dim {} must be divisible by model.n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if self.ffn_mult == 0 {
            problems.push(String::from("model.ffn_mult must be positive"));
        }
        if self.prompt_slots == 0 {
            problems.push(String::from("model.prompt_slots must be positive"));
        }
        if self.max_len == 0 {
            problems.push(String::from("model.max_len must be positive"));
        }
        if !(self.ln_eps > 0.0) {
            problems.push(String::from("model.ln_eps must be positive"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Debug pins that bypass parts of the mechanism with exact constants.
/// `one_hot_schedule` replaces the softmax weights with a one-hot row at
/// the task's position (mod pool size); `gate_open` short-circuits fusion
/// so the composed prompt passes through untouched. Both remove their
/// parameters from the gradient path entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PinFlags {
    pub one_hot_schedule: bool,
    pub gate_open: bool,
}

impl PinFlags {
    pub fn none() -> Self {
        PinFlags {
            one_hot_schedule: false,
            gate_open: false,
        }
    }
}

/// Name -> node map for parameters staged on a tape, in canonical order.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    entries: Vec<(String, NodeId)>,
}

impl ParamBinding {
    pub fn from_parts(names: &[String], ids: &[NodeId]) -> Self {
        assert_eq!(
            names.len(),
            ids.len(),
            "ParamBinding: {} names but {} nodes",
            names.len(),
            ids.len()
        );
        ParamBinding {
            entries: names
                .iter()
                .cloned()
                .zip(ids.iter().copied())
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    pub fn node(&self, name: &str) -> NodeId {
        self.get(name)
            .unwrap_or_else(|| panic!("ParamBinding: unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.entries.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// Stages every model parameter as a differentiable leaf.
pub fn stage_params(tape: &mut Tape, state: &ModelState) -> ParamBinding {
    let mut entries = Vec::new();
    state.visit_params(|name, t| {
        let id = tape.leaf(t);
        entries.push((String::from(name), id));
    });
    ParamBinding { entries }
}

/// Handles to the interesting intermediate nodes of one task-batch graph.
#[derive(Debug, Clone, Copy)]
pub struct TaskBatchGraph {
    pub loss: NodeId,
    pub logits: NodeId,
    /// Scheduling weights node; None when pinned one-hot.
    pub weights: Option<NodeId>,
    /// Gate node; None when pinned open.
    pub gate: Option<NodeId>,
    pub composed: NodeId,
    pub fused: NodeId,
}

fn encoder_block(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    binding: &ParamBinding,
    layer: usize,
    x: NodeId,
) -> NodeId {
    let dh = cfg.head_dim();
    let q = tape.matmul(x, binding.node(&format!("enc.l{layer}.attn.wq")));
    let k = tape.matmul(x, binding.node(&format!("enc.l{layer}.attn.wk")));
    let v = tape.matmul(x, binding.node(&format!("enc.l{layer}.attn.wv")));
    let scale = 1.0 / crate::math::sqrt(dh as f64);
    let mut head_ctx = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let probs = tape.softmax_temp(scaled, 1.0);
        head_ctx.push(tape.matmul(probs, vh));
    }
    let ctx = if head_ctx.len() == 1 {
        head_ctx[0]
    } else {
        tape.concat_cols(&head_ctx)
    };
    let attn = tape.matmul(ctx, binding.node(&format!("enc.l{layer}.attn.wo")));
    let res1 = tape.add(x, attn);
    let x1 = tape.layer_norm(res1, cfg.ln_eps);

    let h1 = tape.matmul(x1, binding.node(&format!("enc.l{layer}.ffn.w1")));
    let h1b = tape.add(h1, binding.node(&format!("enc.l{layer}.ffn.b1")));
    let h1r = tape.relu(h1b);
    let h2 = tape.matmul(h1r, binding.node(&format!("enc.l{layer}.ffn.w2")));
    let h2b = tape.add(h2, binding.node(&format!("enc.l{layer}.ffn.b2")));
    let res2 = tape.add(x1, h2b);
    tape.layer_norm(res2, cfg.ln_eps)
}

/// Scheduling, composition and fusion for one task; yields the fused
/// (slots x dim) node plus the diagnostic handles.
fn build_fused_prompt(
    tape: &mut Tape,
    state: &ModelState,
    binding: &ParamBinding,
    task_pos: usize,
    tau: f64,
    pins: &PinFlags,
) -> (NodeId, Option<NodeId>, Option<NodeId>, NodeId) {
    let cfg = &state.cfg;
    let tid = state.task_ids[task_pos];
    let (w_node, w_learned) = if pins.one_hot_schedule {
        let mut row = Tensor::zeros(alloc::vec![state.k]);
        row.data[task_pos % state.k] = 1.0;
        (tape.constant(&row), false)
    } else {
        let z = binding.node(&format!("sched.z.{tid}"));
        (schedule_weights_node(tape, z, tau), true)
    };
    let weights = w_learned.then_some(w_node);
    let composed = compose_prompt_node(
        tape,
        w_node,
        binding.node("pool"),
        cfg.prompt_slots,
        cfg.dim,
    );
    if pins.gate_open {
        (composed, weights, None, composed)
    } else {
        let e = binding.node(&format!("temb.{tid}"));
        let gate = gate_node(tape, e, binding.node("gate.wg"));
        let fused = fuse_node(tape, gate, composed, e);
        (fused, weights, Some(gate), composed)
    }
}

/// Encodes one example to its pooled representation.
fn encode_example(
    tape: &mut Tape,
    state: &ModelState,
    binding: &ParamBinding,
    positions: NodeId,
    fused: NodeId,
    tokens: &[u32],
) -> NodeId {
    let cfg = &state.cfg;
    assert!(
        !tokens.is_empty(),
        "encode: empty token sequence"
    );
    assert!(
        tokens.len() <= cfg.max_len,
        "encode: sequence length {} exceeds max_len {}",
        tokens.len(),
        cfg.max_len
    );
    let rows: Vec<usize> = tokens
        .iter()
        .map(|&t| {
            let t = t as usize;
            assert!(
                t < cfg.vocab_size,
                "encode: token {t} outside vocabulary of {}",
                cfg.vocab_size
            );
            t
        })
        .collect();
    let tok = tape.gather_rows(binding.node("embed.tok"), &rows);
    let tok = if cfg.use_positions {
        let pos = tape.slice_rows(positions, 0, rows.len());
        tape.add(tok, pos)
    } else {
        tok
    };
    let mut x = tape.concat_rows(&[fused, tok]);
    for layer in 0..cfg.n_layers {
        x = encoder_block(tape, cfg, binding, layer, x);
    }
    let pooled_src = if cfg.pool_includes_prompt {
        x
    } else {
        tape.slice_rows(x, cfg.prompt_slots, rows.len())
    };
    tape.mean_rows(pooled_src)
}

/// Logits for a batch of examples of one task: (batch x classes).
pub fn build_task_logits(
    tape: &mut Tape,
    state: &ModelState,
    binding: &ParamBinding,
    task_pos: usize,
    batch: &[&Example],
    tau: f64,
    pins: &PinFlags,
) -> TaskBatchGraph {
    assert!(!batch.is_empty(), "build_task_logits: empty batch");
    let tid = state.task_ids[task_pos];
    let (fused, weights, gate, composed) =
        build_fused_prompt(tape, state, binding, task_pos, tau, pins);
    let positions = tape.constant(&state.positions);
    let pooled: Vec<NodeId> = batch
        .iter()
        .map(|ex| encode_example(tape, state, binding, positions, fused, &ex.tokens))
        .collect();
    let stack = tape.concat_rows(&pooled);
    let logits = tape.matmul(stack, binding.node(&format!("head.{tid}")));
    TaskBatchGraph {
        loss: logits,
        logits,
        weights,
        gate,
        composed,
        fused,
    }
}

/// Mean cross-entropy over one task batch, plus diagnostic handles.
pub fn build_task_loss(
    tape: &mut Tape,
    state: &ModelState,
    binding: &ParamBinding,
    task_pos: usize,
    batch: &[&Example],
    tau: f64,
    pins: &PinFlags,
) -> TaskBatchGraph {
    let mut graph = build_task_logits(tape, state, binding, task_pos, batch, tau, pins);
    let labels: Vec<usize> = batch.iter().map(|ex| ex.label).collect();
    graph.loss = tape.cross_entropy_mean(graph.logits, &labels);
    graph
}

/// Fraction of examples whose argmax logit matches the label. Ties go to
/// the lower class index. Forward-only; chunked to bound tape size.
pub fn task_accuracy(
    state: &ModelState,
    task_pos: usize,
    examples: &[Example],
    tau: f64,
    pins: &PinFlags,
) -> f64 {
    assert!(!examples.is_empty(), "task_accuracy: no examples");
    let names = state.param_names();
    let mut correct = 0usize;
    for chunk in examples.chunks(32) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = {
            let mut ids = Vec::with_capacity(names.len());
            state.visit_params(|_, t| ids.push(tape.leaf(t)));
            ids
        };
        let binding = ParamBinding::from_parts(&names, &ids);
        let refs: Vec<&Example> = chunk.iter().collect();
        let graph = build_task_logits(&mut tape, state, &binding, task_pos, &refs, tau, pins);
        let logits = tape.value(graph.logits);
        let classes = tape.shape(graph.logits)[1];
        for (i, ex) in chunk.iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            let mut best = 0usize;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == ex.label);
        }
    }
    correct as f64 / examples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelState;
    use crate::tasks::{generate_tasks, ConflictProfile};

    fn setup(seed: u64) -> (ModelState, crate::tasks::TaskSuite) {
        let cfg = EncoderConfig::tiny_for_tests();
        let suite = generate_tasks(2, seed, ConflictProfile::None).unwrap();
        (ModelState::init(&cfg, 3, &suite, seed), suite)
    }

    fn batch_of(suite: &crate::tasks::TaskSuite, pos: usize, n: usize) -> Vec<&Example> {
        suite.tasks[pos].train.iter().take(n).collect()
    }

    #[test]
    fn forward_is_deterministic_and_shapes_are_right() {
        let (state, suite) = setup(3);
        let batch = batch_of(&suite, 0, 4);
        let build = || {
            let mut tape = Tape::new();
            let binding = stage_params(&mut tape, &state);
            let graph = build_task_loss(
                &mut tape,
                &state,
                &binding,
                0,
                &batch,
                0.9,
                &PinFlags::none(),
            );
            (
                tape.value(graph.loss).to_vec(),
                tape.value(graph.logits).to_vec(),
                tape.shape(graph.logits).to_vec(),
                tape.value(graph.weights.unwrap()).to_vec(),
                tape.value(graph.fused).len(),
            )
        };
        let (loss_a, logits_a, shape_a, w_a, fused_len) = build();
        let (loss_b, logits_b, ..) = build();
        assert_eq!(loss_a, loss_b);
        assert_eq!(logits_a, logits_b);
        assert_eq!(shape_a, alloc::vec![4, 2]);
        assert_eq!(w_a.len(), 3);
        assert!((w_a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(fused_len, state.cfg.prompt_slots * state.cfg.dim);
        assert!(loss_a[0].is_finite() && loss_a[0] > 0.0);
    }

    #[test]
    fn zero_layer_encoder_matches_hand_computed_pooling() {
        // With no layers, pooling averages the fused slots and positioned
        // token embeddings directly; verify against an independent
        // computation from the raw tensors.
        let mut cfg = EncoderConfig::tiny_for_tests();
        cfg.n_layers = 0;
        let suite = generate_tasks(2, 7, ConflictProfile::None).unwrap();
        let state = ModelState::init(&cfg, 3, &suite, 7);
        let ex = &suite.tasks[0].train[0];

        let mut tape = Tape::new();
        let binding = stage_params(&mut tape, &state);
        let graph = build_task_logits(
            &mut tape,
            &state,
            &binding,
            0,
            &[ex],
            0.9,
            &PinFlags::none(),
        );

        // Oracle: weights, composition, gate and fusion via the plain eval
        // path, then mean pooling and the head product by hand.
        let d = cfg.dim;
        let m = cfg.prompt_slots;
        let w = crate::scheduler::schedule_weights(&state.scheduler.rows[0].data, 0.9);
        let composed = crate::scheduler::compose_prompt(&w, &state.pool);
        let e = &state.task_embeddings.row(0).data;
        let g = crate::fusion::gate_vector(&state.gate_w, e);
        let fused = crate::fusion::fuse(&g, &composed, e);

        let len = ex.tokens.len();
        let total = (m + len) as f64;
        let mut pooled = alloc::vec![0.0; d];
        for s in 0..m {
            for j in 0..d {
                pooled[j] += fused.values.data[s * d + j] / total;
            }
        }
        for (i, &t) in ex.tokens.iter().enumerate() {
            for j in 0..d {
                let emb = state.token_embedding.data[t as usize * d + j];
                let pos = state.positions.data[i * d + j];
                pooled[j] += (emb + pos) / total;
            }
        }
        let head = &state.heads[0];
        let mut logits = alloc::vec![0.0; 2];
        for c in 0..2 {
            for j in 0..d {
                logits[c] += pooled[j] * head.data[j * 2 + c];
            }
        }
        let got = tape.value(graph.logits);
        for (a, b) in got.iter().zip(logits.iter()) {
            assert!((a - b).abs() < 1e-12, "logits {got:?} vs oracle {logits:?}");
        }
    }

    #[test]
    fn without_positions_and_layers_token_order_is_irrelevant() {
        let mut cfg = EncoderConfig::tiny_for_tests();
        cfg.n_layers = 0;
        cfg.use_positions = false;
        let suite = generate_tasks(1, 5, ConflictProfile::None).unwrap();
        let state = ModelState::init(&cfg, 2, &suite, 5);
        let ex = suite.tasks[0].train[0].clone();
        let mut reversed = ex.clone();
        reversed.tokens.reverse();

        let logits_of = |e: &Example| {
            let mut tape = Tape::new();
            let binding = stage_params(&mut tape, &state);
            let graph = build_task_logits(
                &mut tape,
                &state,
                &binding,
                0,
                &[e],
                1.0,
                &PinFlags::none(),
            );
            tape.value(graph.logits).to_vec()
        };
        let a = logits_of(&ex);
        let b = logits_of(&reversed);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pinned_one_hot_extracts_exactly_one_pool_row() {
        let (state, suite) = setup(11);
        let batch = batch_of(&suite, 1, 2);
        let mut tape = Tape::new();
        let binding = stage_params(&mut tape, &state);
        let pins = PinFlags {
            one_hot_schedule: true,
            gate_open: true,
        };
        let graph = build_task_loss(&mut tape, &state, &binding, 1, &batch, 0.9, &pins);
        assert!(graph.weights.is_none());
        assert!(graph.gate.is_none());
        // Task position 1 with K = 3 pins prompt row 1; fused == composed.
        let fused = tape.value(graph.fused);
        assert_eq!(fused, state.pool.prompt(1));

        // Scheduler logits, task embedding and gate receive no gradient.
        let grads = tape.backward(graph.loss);
        assert!(grads.get(binding.node("sched.z.1")).is_none());
        assert!(grads.get(binding.node("temb.1")).is_none());
        assert!(grads.get(binding.node("gate.wg")).is_none());
        // The pool does, but only in row 1.
        let pg = grads.expect(binding.node("pool"));
        let width = state.cfg.prompt_slots * state.cfg.dim;
        assert!(pg[width..2 * width].iter().any(|&v| v != 0.0));
        assert!(pg[..width].iter().all(|&v| v == 0.0));
        assert!(pg[2 * width..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unpinned_graph_reaches_all_mechanism_parameters() {
        let (state, suite) = setup(13);
        let batch = batch_of(&suite, 0, 3);
        let mut tape = Tape::new();
        let binding = stage_params(&mut tape, &state);
        let graph = build_task_loss(
            &mut tape,
            &state,
            &binding,
            0,
            &batch,
            0.9,
            &PinFlags::none(),
        );
        let grads = tape.backward(graph.loss);
        for name in [
            "embed.tok",
            "enc.l0.attn.wq",
            "enc.l0.ffn.w2",
            "pool",
            "gate.wg",
            "sched.z.0",
            "temb.0",
            "head.0",
        ] {
            assert!(
                grads.get(binding.node(name)).is_some(),
                "no gradient reached {name}"
            );
        }
        // Parameters of the other task stay untouched.
        assert!(grads.get(binding.node("sched.z.1")).is_none());
        assert!(grads.get(binding.node("head.1")).is_none());
        // Forward replay is bit-exact.
        assert_eq!(tape.replay_max_abs_diff(), 0.0);
    }

    #[test]
    fn accuracy_is_a_valid_fraction_and_deterministic() {
        let (state, suite) = setup(17);
        let acc1 = task_accuracy(&state, 0, &suite.tasks[0].val, 0.9, &PinFlags::none());
        let acc2 = task_accuracy(&state, 0, &suite.tasks[0].val, 0.9, &PinFlags::none());
        assert_eq!(acc1, acc2);
        assert!((0.0..=1.0).contains(&acc1));
    }

    #[test]
    #[should_panic(expected = "outside vocabulary")]
    fn out_of_vocabulary_token_panics() {
        let (state, _) = setup(3);
        let bad = Example {
            tokens: alloc::vec![19, 25],
            label: 0,
        };
        let mut tape = Tape::new();
        let binding = stage_params(&mut tape, &state);
        let _ = build_task_logits(
            &mut tape,
            &state,
            &binding,
            0,
            &[&bad],
            1.0,
            &PinFlags::none(),
        );
    }

    #[test]
    fn config_validation_names_offending_fields() {
        let mut cfg = EncoderConfig::tiny_for_tests();
        cfg.dim = 10;
        cfg.n_heads = 4;
        cfg.ffn_mult = 0;
        let err = cfg.validate().unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("model.dim"), "{msg}");
        assert!(msg.contains("model.ffn_mult"), "{msg}");
    }
}
