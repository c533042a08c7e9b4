//! Named model parameters and their initialization.
//!
//! Every parameter has a stable name ("pool", "enc.l0.attn.wq",
//! "sched.z.3", ...) and draws its initial values from an RNG stream
//! derived from that name. Two consequences the rest of the crate relies
//! on: initialization of one parameter is unaffected by the presence or
//! size of any other, and per-task parameters ("sched.z.{id}",
//! "temb.{id}", "head.{id}") are identical across runs that share a seed
//! even when the runs train different task subsets.
//!
//! `visit_params` fixes the canonical parameter order used by the
//! optimizer, checkpoints and gradient accumulation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::fusion::TaskEmbeddingTable;
use crate::math;
use crate::model::EncoderConfig;
use crate::rng::Rng;
use crate::scheduler::{init_scheduler, PromptPool, SchedulerState};
use crate::tasks::TaskSuite;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

/// Complete trainable state plus the constant position table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub cfg: EncoderConfig,
    pub k: usize,
    /// Task ids in suite order; all per-task vectors below align with it.
    pub task_ids: Vec<usize>,
    pub classes: Vec<usize>,
    pub token_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub pool: PromptPool,
    pub scheduler: SchedulerState,
    pub task_embeddings: TaskEmbeddingTable,
    pub gate_w: Tensor,
    pub heads: Vec<Tensor>,
    /// Sinusoidal position table, (max_len x dim). Not a parameter.
    pub positions: Tensor,
}

fn init_matrix(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut t = Tensor::zeros(alloc::vec![rows, cols]);
    let mut rng = Rng::derive(seed, name, 0);
    rng.fill_normal(&mut t.data, std);
    t
}

pub fn sinusoidal_positions(max_len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(alloc::vec![max_len, dim]);
    for p in 0..max_len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let rate = math::exp(-math::ln(10_000.0) * 2.0 * pair / dim as f64);
            let angle = p as f64 * rate;
            t.data[p * dim + i] = if i % 2 == 0 {
                math::sin(angle)
            } else {
                math::cos(angle)
            };
        }
    }
    t
}

impl ModelState {
    /// Fresh state for `suite` with a pool of `k` prompts. Weight matrices
    /// are N(0, 1/sqrt(fan_in)); scheduler logits, the gate matrix and all
    /// biases start at zero.
    pub fn init(cfg: &EncoderConfig, k: usize, suite: &TaskSuite, seed: u64) -> Self {
        cfg.validate().expect("ModelState::init: invalid encoder config");
        assert!(k > 0, "ModelState::init: pool size must be positive");
        let d = cfg.dim;
        let f = cfg.ffn_mult * d;
        let std_d = 1.0 / math::sqrt(d as f64);
        let std_f = 1.0 / math::sqrt(f as f64);

        let task_ids: Vec<usize> = suite.tasks.iter().map(|t| t.id).collect();
        {
            let unique: BTreeSet<_> = task_ids.iter().collect();
            assert_eq!(unique.len(), task_ids.len(), "duplicate task ids in suite");
        }

        let layers = (0..cfg.n_layers)
            .map(|l| LayerParams {
                wq: init_matrix(seed, &format!("param.enc.l{l}.attn.wq"), d, d, std_d),
                wk: init_matrix(seed, &format!("param.enc.l{l}.attn.wk"), d, d, std_d),
                wv: init_matrix(seed, &format!("param.enc.l{l}.attn.wv"), d, d, std_d),
                wo: init_matrix(seed, &format!("param.enc.l{l}.attn.wo"), d, d, std_d),
                ffn_w1: init_matrix(seed, &format!("param.enc.l{l}.ffn.w1"), d, f, std_d),
                ffn_b1: Tensor::zeros(alloc::vec![f]),
                ffn_w2: init_matrix(seed, &format!("param.enc.l{l}.ffn.w2"), f, d, std_f),
                ffn_b2: Tensor::zeros(alloc::vec![d]),
            })
            .collect();

        let (pool, scheduler) =
            init_scheduler(suite.len(), k, cfg.prompt_slots, d, seed);
        let task_embeddings = TaskEmbeddingTable::init(&task_ids, d, seed);
        let heads = suite
            .tasks
            .iter()
            .map(|t| {
                init_matrix(seed, &format!("param.head.{}", t.id), d, t.classes, std_d)
            })
            .collect();

        ModelState {
            cfg: cfg.clone(),
            k,
            task_ids,
            classes: suite.tasks.iter().map(|t| t.classes).collect(),
            token_embedding: init_matrix(seed, "param.embed.tok", cfg.vocab_size, d, std_d),
            layers,
            pool,
            scheduler,
            task_embeddings,
            gate_w: Tensor::zeros(alloc::vec![d, d]),
            heads,
            positions: sinusoidal_positions(cfg.max_len, d),
        }
    }

    pub fn tasks(&self) -> usize {
        self.task_ids.len()
    }

    pub fn position_of(&self, task_id: usize) -> Option<usize> {
        self.task_ids.iter().position(|&t| t == task_id)
    }

    /// Appends per-task parameters for a new task: zero scheduling logits,
    /// a fresh task embedding and head from the task's own streams. Used
    /// when adapting a trained model to a held-out task.
    pub fn add_task(&mut self, task_id: usize, classes: usize, seed: u64) {
        assert!(
            self.position_of(task_id).is_none(),
            "add_task: task {task_id} already present"
        );
        let d = self.cfg.dim;
        let std_d = 1.0 / math::sqrt(d as f64);
        self.task_ids.push(task_id);
        self.classes.push(classes);
        self.scheduler.rows.push(Tensor::zeros(alloc::vec![self.k]));
        self.task_embeddings.push_row(task_id, seed);
        self.heads.push(init_matrix(
            seed,
            &format!("param.head.{task_id}"),
            d,
            classes,
            std_d,
        ));
    }

    /// Canonical parameter iteration: backbone, pool, gate, then per-task
    /// rows in suite order.
    pub fn visit_params<F: FnMut(&str, &Tensor)>(&self, mut f: F) {
        f("embed.tok", &self.token_embedding);
        for (l, layer) in self.layers.iter().enumerate() {
            f(&format!("enc.l{l}.attn.wq"), &layer.wq);
            f(&format!("enc.l{l}.attn.wk"), &layer.wk);
            f(&format!("enc.l{l}.attn.wv"), &layer.wv);
            f(&format!("enc.l{l}.attn.wo"), &layer.wo);
            f(&format!("enc.l{l}.ffn.w1"), &layer.ffn_w1);
            f(&format!("enc.l{l}.ffn.b1"), &layer.ffn_b1);
            f(&format!("enc.l{l}.ffn.w2"), &layer.ffn_w2);
            f(&format!("enc.l{l}.ffn.b2"), &layer.ffn_b2);
        }
        f("pool", &self.pool.values);
        f("gate.wg", &self.gate_w);
        for (pos, &tid) in self.task_ids.iter().enumerate() {
            f(&format!("sched.z.{tid}"), &self.scheduler.rows[pos]);
            f(&format!("temb.{tid}"), self.task_embeddings.row(pos));
            f(&format!("head.{tid}"), &self.heads[pos]);
        }
    }

    pub fn visit_params_mut<F: FnMut(&str, &mut Tensor)>(&mut self, mut f: F) {
        f("embed.tok", &mut self.token_embedding);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("enc.l{l}.attn.wq"), &mut layer.wq);
            f(&format!("enc.l{l}.attn.wk"), &mut layer.wk);
            f(&format!("enc.l{l}.attn.wv"), &mut layer.wv);
            f(&format!("enc.l{l}.attn.wo"), &mut layer.wo);
            f(&format!("enc.l{l}.ffn.w1"), &mut layer.ffn_w1);
            f(&format!("enc.l{l}.ffn.b1"), &mut layer.ffn_b1);
            f(&format!("enc.l{l}.ffn.w2"), &mut layer.ffn_w2);
            f(&format!("enc.l{l}.ffn.b2"), &mut layer.ffn_b2);
        }
        f("pool", &mut self.pool.values);
        f("gate.wg", &mut self.gate_w);
        let ids = self.task_ids.clone();
        for (pos, &tid) in ids.iter().enumerate() {
            f(&format!("sched.z.{tid}"), &mut self.scheduler.rows[pos]);
            f(&format!("temb.{tid}"), self.task_embeddings.row_mut(pos));
            f(&format!("head.{tid}"), &mut self.heads[pos]);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(|name, _| names.push(String::from(name)));
        names
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.visit_params(|n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Overwrites one parameter; shape must match. Returns false when the
    /// name is unknown.
    pub fn set_param(&mut self, name: &str, value: &Tensor) -> bool {
        let mut done = false;
        self.visit_params_mut(|n, t| {
            if n == name {
                assert_eq!(
                    t.shape, value.shape,
                    "set_param {name}: shape {:?} vs {:?}",
                    t.shape, value.shape
                );
                *t = value.clone();
                done = true;
            }
        });
        done
    }
}

pub fn is_backbone(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("enc.")
}

/// Which parameters a training run may update.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainScope {
    All,
    /// Everything except token embedding and encoder layers.
    FreezeBackbone,
    /// Exactly the named parameters.
    Only(Vec<String>),
}

pub fn trainable_names(state: &ModelState, scope: &TrainScope) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    match scope {
        TrainScope::All => state.visit_params(|n, _| {
            out.insert(String::from(n));
        }),
        TrainScope::FreezeBackbone => state.visit_params(|n, _| {
            if !is_backbone(n) {
                out.insert(String::from(n));
            }
        }),
        TrainScope::Only(names) => {
            let known: BTreeSet<String> = state.param_names().into_iter().collect();
            for n in names {
                assert!(known.contains(n), "trainable_names: unknown parameter {n}");
                out.insert(n.clone());
            }
        }
    }
    out
}
