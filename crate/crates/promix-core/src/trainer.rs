//! Multi-task training driver.
//!
//! One step: every task in the suite builds its own batch graph, runs one
//! backward sweep and reports its loss and the L2 norm of its prompt-pool
//! gradient (the probe used by the grad-norm weighting). Lambdas are then
//! refreshed, per-task gradients are combined as `sum_t lambda_t * g_t`,
//! and the optimizer applies a single update. Batches come from per-task
//! streams derived from `(seed, "batch", task_id)`, so a task's sample
//! order does not depend on which other tasks are present. That makes a
//! joint run over T tasks directly comparable with T isolated runs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::model::{
    build_task_loss, stage_params, task_accuracy, EncoderConfig, PinFlags,
};
use crate::optim::{OptConfig, Optimizer};
use crate::params::{trainable_names, ModelState, TrainScope};
use crate::rng::Rng;
use crate::scheduler::{schedule_weights, scheduling_entropy};
use crate::tasks::{Task, TaskSuite};
use crate::tensor::l2_norm;
use crate::weights::{LambdaStrategy, LossWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Scheduling temperature, fixed for the whole run.
    pub tau: f64,
    /// Prompt pool size K.
    pub k: usize,
    pub opt: OptConfig,
    pub lambda_strategy: LambdaStrategy,
    pub lambda_beta: f64,
    pub lambda_floor: f64,
    pub freeze_backbone: bool,
    pub pins: PinFlags,
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    /// Desk-scale preset. The backbone stays frozen and the gate is pinned
    /// open so the prompt pathway carries the task signal; with a trainable
    /// backbone or an active gate the scheduler's logits barely move and
    /// every temperature looks alike. The hot learning rate and long
    /// horizon are what let the scheduling logits drift away from uniform.
    pub fn default_desk() -> Self {
        TrainConfig {
            seed: 0,
            steps: 1200,
            batch_size: 8,
            tau: 1.1,
            k: 4,
            opt: OptConfig {
                lr: 0.02,
                ..OptConfig::default_adam()
            },
            lambda_strategy: LambdaStrategy::GradNorm,
            lambda_beta: 0.9,
            lambda_floor: 1e-8,
            freeze_backbone: true,
            pins: PinFlags {
                gate_open: true,
                ..PinFlags::none()
            },
            encoder: EncoderConfig::default_desk(),
        }
    }

    /// Collects every invalid field into one error message. `steps = 0` is
    /// deliberately legal: it trains nothing and reports metrics at
    /// initialization, which is the cheapest possible smoke test.
    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems: Vec<String> = Vec::new();
        if self.batch_size == 0 {
            problems.push(String::from("train.batch_size must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            problems.push(String::from("train.tau must be positive and finite"));
        }
        if self.k == 0 {
            problems.push(String::from("train.k must be positive"));
        }
        if !(0.0..1.0).contains(&self.lambda_beta) {
            problems.push(String::from("train.lambda_beta must be in [0, 1)"));
        }
        if !(self.lambda_floor > 0.0) {
            problems.push(String::from("train.lambda_floor must be positive"));
        }
        if let Err(CoreError::InvalidConfig(msg)) = self.opt.validate() {
            problems.push(msg);
        }
        if let Err(CoreError::InvalidConfig(msg)) = self.encoder.validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Per-task, per-step history.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrace {
    pub task_id: usize,
    pub losses: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Everything a finished run reports. Per-task vectors follow suite order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task_ids: Vec<usize>,
    pub task_names: Vec<String>,
    pub steps: usize,
    pub traces: Vec<TaskTrace>,
    pub val_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    pub macro_val_accuracy: f64,
    pub macro_test_accuracy: f64,
    pub mean_gates: Vec<f64>,
    /// Final scheduling weights, one row of length K per task.
    pub final_weights: Vec<Vec<f64>>,
    pub final_entropies: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Stamped by callers that time the run; the trainer leaves it at zero
    /// so reports stay reproducible byte for byte.
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn mean_final_entropy(&self) -> f64 {
        self.final_entropies.iter().sum::<f64>() / self.final_entropies.len() as f64
    }
}

/// Initializes fresh state and trains it on the suite, honoring
/// `freeze_backbone` from the config.
pub fn train(
    cfg: &TrainConfig,
    suite: &TaskSuite,
) -> Result<(ModelState, MetricsReport), CoreError> {
    let state = ModelState::init(&cfg.encoder, cfg.k, suite, cfg.seed);
    let scope = if cfg.freeze_backbone {
        TrainScope::FreezeBackbone
    } else {
        TrainScope::All
    };
    train_scoped(cfg, suite, state, &scope)
}

/// Trains existing state on the suite, updating only parameters in scope.
/// The state may carry more tasks than the suite (adaptation trains one
/// held-out task on a state that keeps its original tasks around).
pub fn train_scoped(
    cfg: &TrainConfig,
    suite: &TaskSuite,
    mut state: ModelState,
    scope: &TrainScope,
) -> Result<(ModelState, MetricsReport), CoreError> {
    cfg.validate()?;
    if suite.is_empty() {
        return Err(CoreError::InvalidConfig(String::from(
            "training suite has no tasks",
        )));
    }
    // State position of every suite task.
    let positions: Vec<usize> = suite
        .tasks
        .iter()
        .map(|t| {
            state
                .position_of(t.id)
                .unwrap_or_else(|| panic!("train: state has no parameters for task {}", t.id))
        })
        .collect();

    let t_count = suite.len();
    let trainable = trainable_names(&state, scope);
    let mut weights = LossWeights::uniform(
        t_count,
        cfg.lambda_strategy,
        cfg.lambda_beta,
        cfg.lambda_floor,
    );
    weights.validate()?;
    let mut opt = Optimizer::new(cfg.opt.clone());
    let mut batch_rngs: Vec<Rng> = suite
        .tasks
        .iter()
        .map(|t| Rng::derive(cfg.seed, "batch", t.id as u64))
        .collect();
    let mut traces: Vec<TaskTrace> = suite
        .tasks
        .iter()
        .map(|t| TaskTrace {
            task_id: t.id,
            losses: Vec::with_capacity(cfg.steps),
            entropies: Vec::with_capacity(cfg.steps),
        })
        .collect();

    for step in 0..cfg.steps {
        let mut step_losses = Vec::with_capacity(t_count);
        let mut step_norms = Vec::with_capacity(t_count);
        let mut per_task_grads: Vec<BTreeMap<String, Vec<f64>>> =
            Vec::with_capacity(t_count);

        for (pos, task) in suite.tasks.iter().enumerate() {
            let state_pos = positions[pos];
            let batch: Vec<&crate::tasks::Example> = (0..cfg.batch_size)
                .map(|_| &task.train[batch_rngs[pos].next_below(task.train.len())])
                .collect();

            let mut tape = crate::tape::Tape::new();
            let binding = stage_params(&mut tape, &state);
            let graph = build_task_loss(
                &mut tape, &state, &binding, state_pos, &batch, cfg.tau, &cfg.pins,
            );
            let loss = tape.scalar_value(graph.loss);
            if !loss.is_finite() {
                let last: Vec<f64> = traces
                    .iter()
                    .map(|tr| tr.losses.last().copied().unwrap_or(f64::NAN))
                    .collect();
                return Err(CoreError::Diverged {
                    step,
                    message: format!(
                        "task {} produced loss {loss}; last finite losses {last:?}",
                        task.id
                    ),
                    partial_losses: traces.iter().map(|tr| tr.losses.clone()).collect(),
                });
            }

            let grads = tape.backward(graph.loss);
            let pool_norm = grads
                .get(binding.node("pool"))
                .map(l2_norm)
                .unwrap_or(0.0);

            let mut gmap: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, node) in binding.iter() {
                if !trainable.contains(name) {
                    continue;
                }
                if let Some(g) = grads.get(node) {
                    gmap.insert(String::from(name), g.to_vec());
                }
            }

            let entropy = effective_entropy(&state, state_pos, cfg);
            traces[pos].losses.push(loss);
            traces[pos].entropies.push(entropy);
            step_losses.push(loss);
            step_norms.push(pool_norm);
            per_task_grads.push(gmap);
        }

        weights.update(&step_norms, &step_losses);

        let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (pos, gmap) in per_task_grads.iter().enumerate() {
            let lambda = weights.lambdas[pos];
            for (name, g) in gmap {
                match total.get_mut(name) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g.iter()) {
                            *a += lambda * v;
                        }
                    }
                    None => {
                        total.insert(name.clone(), g.iter().map(|v| lambda * v).collect());
                    }
                }
            }
        }

        state.visit_params_mut(|name, tensor| {
            if let Some(g) = total.get(name) {
                opt.update(name, tensor, g);
            }
        });
    }

    let report = summarize(cfg, suite, &positions, &state, traces, &weights);
    Ok((state, report))
}

/// Entropy of the weights the forward pass actually used this step.
fn effective_entropy(state: &ModelState, state_pos: usize, cfg: &TrainConfig) -> f64 {
    if cfg.pins.one_hot_schedule {
        return 0.0;
    }
    let w = schedule_weights(&state.scheduler.rows[state_pos].data, cfg.tau);
    scheduling_entropy(&w)
}

fn effective_weights(state: &ModelState, state_pos: usize, cfg: &TrainConfig) -> Vec<f64> {
    if cfg.pins.one_hot_schedule {
        let mut w = alloc::vec![0.0; state.k];
        w[state_pos % state.k] = 1.0;
        w
    } else {
        schedule_weights(&state.scheduler.rows[state_pos].data, cfg.tau)
    }
}

fn summarize(
    cfg: &TrainConfig,
    suite: &TaskSuite,
    positions: &[usize],
    state: &ModelState,
    traces: Vec<TaskTrace>,
    weights: &LossWeights,
) -> MetricsReport {
    let mut val_accuracy = Vec::with_capacity(suite.len());
    let mut test_accuracy = Vec::with_capacity(suite.len());
    let mut mean_gates = Vec::with_capacity(suite.len());
    let mut final_weights = Vec::with_capacity(suite.len());
    let mut final_entropies = Vec::with_capacity(suite.len());

    for (pos, task) in suite.tasks.iter().enumerate() {
        let state_pos = positions[pos];
        val_accuracy.push(task_accuracy(state, state_pos, &task.val, cfg.tau, &cfg.pins));
        test_accuracy.push(task_accuracy(
            state, state_pos, &task.test, cfg.tau, &cfg.pins,
        ));
        let gate_mean = if cfg.pins.gate_open {
            1.0
        } else {
            let e = state.task_embeddings.row(state_pos);
            let g = crate::fusion::gate_vector(&state.gate_w, &e.data);
            g.iter().sum::<f64>() / g.len() as f64
        };
        mean_gates.push(gate_mean);
        let w = effective_weights(state, state_pos, cfg);
        final_entropies.push(scheduling_entropy(&w));
        final_weights.push(w);
    }

    let t = suite.len() as f64;
    MetricsReport {
        task_ids: suite.tasks.iter().map(|x| x.id).collect(),
        task_names: suite.tasks.iter().map(|x| x.name.clone()).collect(),
        steps: cfg.steps,
        traces,
        macro_val_accuracy: val_accuracy.iter().sum::<f64>() / t,
        macro_test_accuracy: test_accuracy.iter().sum::<f64>() / t,
        val_accuracy,
        test_accuracy,
        mean_gates,
        final_weights,
        final_entropies,
        lambdas: weights.lambdas.clone(),
        wall_clock_secs: 0.0,
    }
}

/// Adapts a trained model to one new task with an equal, fixed budget:
/// only the task's own new parameters (scheduling logits, embedding, head)
/// may move, so the score isolates how much the frozen prompt machinery
/// helps a newcomer. Returns the task's test accuracy after adaptation.
pub fn adapt_to_task(
    cfg: &TrainConfig,
    base: &ModelState,
    task: &Task,
    adapt_steps: usize,
) -> Result<f64, CoreError> {
    let mut state = base.clone();
    if state.position_of(task.id).is_none() {
        state.add_task(task.id, task.classes, cfg.seed);
    }
    let single = TaskSuite {
        tasks: alloc::vec![task.clone()],
        seed: cfg.seed,
        profile: crate::tasks::ConflictProfile::None,
    };
    let mut adapt_cfg = cfg.clone();
    adapt_cfg.steps = adapt_steps;
    let scope = TrainScope::Only(alloc::vec![
        format!("sched.z.{}", task.id),
        format!("temb.{}", task.id),
        format!("head.{}", task.id),
    ]);
    let (_, report) = train_scoped(&adapt_cfg, &single, state, &scope)?;
    Ok(report.test_accuracy[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub task_id: usize,
    pub scheduled_accuracy: f64,
    pub baseline_accuracy: f64,
}

/// Held-out transfer comparison between two trained models under equal
/// adaptation budgets. The gain is the ratio of mean post-adaptation
/// held-out accuracies.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub outcomes: Vec<AdaptOutcome>,
    pub scheduled_mean: f64,
    pub baseline_mean: f64,
    pub gain: f64,
}

pub fn transfer_gain(
    scheduled_cfg: &TrainConfig,
    scheduled: &ModelState,
    baseline_cfg: &TrainConfig,
    baseline: &ModelState,
    heldout: &TaskSuite,
    adapt_steps: usize,
) -> Result<TransferReport, CoreError> {
    if heldout.is_empty() {
        return Err(CoreError::InvalidConfig(String::from(
            "transfer evaluation needs at least one held-out task",
        )));
    }
    let mut outcomes = Vec::with_capacity(heldout.len());
    for task in &heldout.tasks {
        let s = adapt_to_task(scheduled_cfg, scheduled, task, adapt_steps)?;
        let b = adapt_to_task(baseline_cfg, baseline, task, adapt_steps)?;
        outcomes.push(AdaptOutcome {
            task_id: task.id,
            scheduled_accuracy: s,
            baseline_accuracy: b,
        });
    }
    let n = outcomes.len() as f64;
    let scheduled_mean = outcomes.iter().map(|o| o.scheduled_accuracy).sum::<f64>() / n;
    let baseline_mean = outcomes.iter().map(|o| o.baseline_accuracy).sum::<f64>() / n;
    let gain = scheduled_mean / baseline_mean.max(1e-9);
    Ok(TransferReport {
        outcomes,
        scheduled_mean,
        baseline_mean,
        gain,
    })
}
