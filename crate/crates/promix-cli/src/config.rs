//! Flat key-value experiment configuration.
//!
//! One `key = value` pair per line, dotted namespaces, `#` comments.
//! Defaults cover every key; a file only needs the keys it overrides. The
//! resolved form serializes every key in a fixed order, and feeding that
//! echo back in reproduces the identical configuration, so each run's
//! output directory documents exactly what produced it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Result};
use promix_core::optim::OptKind;
use promix_core::tasks::{self, ConflictProfile};
use promix_core::trainer::TrainConfig;
use promix_core::weights::LambdaStrategy;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// Number of training tasks.
    pub count: usize,
    pub profile: ConflictProfile,
    /// Extra tasks generated after the training tasks, used only for
    /// transfer evaluation.
    pub heldout: usize,
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub test_per_task: usize,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSpec {
    pub enabled: bool,
    pub adapt_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub temperature_grid: Vec<f64>,
    pub task_grid: Vec<usize>,
    pub repeats: usize,
    /// Whether sweep rows also compute transfer gain (costly: each grid
    /// point then trains an extra baseline and adapts held-out tasks).
    pub transfer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub tasks: TaskSpec,
    pub transfer: TransferSpec,
    pub sweep: SweepSpec,
}

impl ExperimentConfig {
    pub fn default_desk() -> Self {
        ExperimentConfig {
            train: TrainConfig::default_desk(),
            tasks: TaskSpec {
                count: 6,
                profile: ConflictProfile::Paired,
                heldout: 2,
                train_per_task: tasks::DEFAULT_TRAIN_PER_TASK,
                // Larger eval splits than the generator's defaults: sweep
                // effects are a handful of percent, so 64-example splits
                // would hide them behind quantization.
                val_per_task: 256,
                test_per_task: 256,
                min_len: 6,
                max_len: 10,
            },
            transfer: TransferSpec {
                enabled: true,
                adapt_steps: 200,
            },
            sweep: SweepSpec {
                temperature_grid: vec![0.5, 0.7, 0.9, 1.1, 1.3],
                task_grid: vec![2, 4, 8, 12, 16],
                repeats: 5,
                transfer: false,
            },
        }
    }

    /// Collects every invalid field across the whole configuration.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if let Err(promix_core::CoreError::InvalidConfig(msg)) = self.train.validate() {
            problems.push(msg);
        }
        if self.tasks.count == 0 {
            problems.push("tasks.count must be positive".into());
        }
        if self.transfer.enabled && self.tasks.heldout == 0 {
            problems.push("tasks.heldout must be positive when transfer.enabled".into());
        }
        for (key, n) in [
            ("tasks.train_per_task", self.tasks.train_per_task),
            ("tasks.val_per_task", self.tasks.val_per_task),
            ("tasks.test_per_task", self.tasks.test_per_task),
        ] {
            if n == 0 {
                problems.push(format!("{key} must be positive"));
            }
        }
        if self.tasks.min_len < 4 || self.tasks.min_len > self.tasks.max_len {
            problems.push(format!(
                "tasks.min_len..tasks.max_len must be a range starting at 4 or more, got {}..{}",
                self.tasks.min_len, self.tasks.max_len
            ));
        }
        if self.tasks.max_len + self.train.encoder.prompt_slots > self.train.encoder.max_len {
            problems.push(format!(
                "tasks.max_len {} plus model.prompt_slots {} exceeds model.max_len {}",
                self.tasks.max_len, self.train.encoder.prompt_slots, self.train.encoder.max_len
            ));
        }
        if self.transfer.adapt_steps == 0 {
            problems.push("transfer.adapt_steps must be positive".into());
        }
        if self.sweep.repeats == 0 {
            problems.push("sweep.repeats must be positive".into());
        }
        check_grid(
            &self.sweep.temperature_grid,
            "sweep.temperature_grid",
            &mut problems,
        );
        if self.sweep.temperature_grid.iter().any(|&t| t <= 0.0) {
            problems.push("sweep.temperature_grid values must be positive".into());
        }
        let tg: Vec<f64> = self.sweep.task_grid.iter().map(|&t| t as f64).collect();
        check_grid(&tg, "sweep.task_grid", &mut problems);
        if self.sweep.task_grid.iter().any(|&t| t == 0) {
            problems.push("sweep.task_grid values must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("invalid config: {}", problems.join("; "))
        }
    }

    /// Serializes every key in canonical order. Parsing this text yields
    /// an equal configuration.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let e = &t.encoder;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", t.seed.to_string());
        kv("steps", t.steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("tau", t.tau.to_string());
        kv("k", t.k.to_string());
        kv("freeze_backbone", t.freeze_backbone.to_string());
        kv("opt.kind", t.opt.kind.as_str().to_string());
        kv("opt.lr", t.opt.lr.to_string());
        kv("opt.beta1", t.opt.beta1.to_string());
        kv("opt.beta2", t.opt.beta2.to_string());
        kv("opt.eps", t.opt.eps.to_string());
        kv("lambda.strategy", t.lambda_strategy.as_str().to_string());
        kv("lambda.beta", t.lambda_beta.to_string());
        kv("lambda.floor", t.lambda_floor.to_string());
        kv("pins.one_hot_schedule", t.pins.one_hot_schedule.to_string());
        kv("pins.gate_open", t.pins.gate_open.to_string());
        kv("model.vocab_size", e.vocab_size.to_string());
        kv("model.dim", e.dim.to_string());
        kv("model.n_layers", e.n_layers.to_string());
        kv("model.n_heads", e.n_heads.to_string());
        kv("model.ffn_mult", e.ffn_mult.to_string());
        kv("model.max_len", e.max_len.to_string());
        kv("model.prompt_slots", e.prompt_slots.to_string());
        kv("model.use_positions", e.use_positions.to_string());
        kv(
            "model.pool_includes_prompt",
            e.pool_includes_prompt.to_string(),
        );
        kv("model.ln_eps", e.ln_eps.to_string());
        kv("tasks.count", self.tasks.count.to_string());
        kv("tasks.profile", self.tasks.profile.as_str().to_string());
        kv("tasks.heldout", self.tasks.heldout.to_string());
        kv(
            "tasks.train_per_task",
            self.tasks.train_per_task.to_string(),
        );
        kv("tasks.val_per_task", self.tasks.val_per_task.to_string());
        kv("tasks.test_per_task", self.tasks.test_per_task.to_string());
        kv("tasks.min_len", self.tasks.min_len.to_string());
        kv("tasks.max_len", self.tasks.max_len.to_string());
        kv("transfer.enabled", self.transfer.enabled.to_string());
        kv("transfer.adapt_steps", self.transfer.adapt_steps.to_string());
        kv(
            "sweep.temperature_grid",
            join_floats(&self.sweep.temperature_grid),
        );
        kv(
            "sweep.task_grid",
            self.sweep
                .task_grid
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("sweep.repeats", self.sweep.repeats.to_string());
        kv("sweep.transfer", self.sweep.transfer.to_string());
        s
    }

    /// Parses key-value text over the defaults. Unknown keys, duplicate
    /// keys and unparsable values are all collected into one error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default_desk();
        let mut problems: Vec<String> = Vec::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected key = value", lineno + 1));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            if let Some(first) = seen.insert(key.to_string(), lineno + 1) {
                problems.push(format!(
                    "line {}: duplicate key {key} (first set on line {first})",
                    lineno + 1
                ));
                continue;
            }
            if let Err(e) = apply_key(&mut cfg, key, value) {
                problems.push(format!("line {}: {e}", lineno + 1));
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            bail!("invalid config: {}", problems.join("; "))
        }
    }
}

fn check_grid(grid: &[f64], name: &str, problems: &mut Vec<String>) {
    if grid.is_empty() {
        problems.push(format!("{name} must be nonempty"));
        return;
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        problems.push(format!("{name} must be strictly increasing"));
    }
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| anyhow!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("{key}: expected true or false, got {value:?}"),
    }
}

fn apply_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let t = &mut cfg.train;
    match key {
        "seed" => t.seed = parse_num(key, value)?,
        "steps" => t.steps = parse_num(key, value)?,
        "batch_size" => t.batch_size = parse_num(key, value)?,
        "tau" => t.tau = parse_num(key, value)?,
        "k" => t.k = parse_num(key, value)?,
        "freeze_backbone" => t.freeze_backbone = parse_bool(key, value)?,
        "opt.kind" => {
            t.opt.kind = OptKind::parse(value)
                .ok_or_else(|| anyhow!("{key}: expected sgd or adam, got {value:?}"))?
        }
        "opt.lr" => t.opt.lr = parse_num(key, value)?,
        "opt.beta1" => t.opt.beta1 = parse_num(key, value)?,
        "opt.beta2" => t.opt.beta2 = parse_num(key, value)?,
        "opt.eps" => t.opt.eps = parse_num(key, value)?,
        "lambda.strategy" => {
            t.lambda_strategy = LambdaStrategy::parse(value).ok_or_else(|| {
                anyhow!("{key}: expected fixed, grad-norm or inverse-loss, got {value:?}")
            })?
        }
        "lambda.beta" => t.lambda_beta = parse_num(key, value)?,
        "lambda.floor" => t.lambda_floor = parse_num(key, value)?,
        "pins.one_hot_schedule" => t.pins.one_hot_schedule = parse_bool(key, value)?,
        "pins.gate_open" => t.pins.gate_open = parse_bool(key, value)?,
        "model.vocab_size" => t.encoder.vocab_size = parse_num(key, value)?,
        "model.dim" => t.encoder.dim = parse_num(key, value)?,
        "model.n_layers" => t.encoder.n_layers = parse_num(key, value)?,
        "model.n_heads" => t.encoder.n_heads = parse_num(key, value)?,
        "model.ffn_mult" => t.encoder.ffn_mult = parse_num(key, value)?,
        "model.max_len" => t.encoder.max_len = parse_num(key, value)?,
        "model.prompt_slots" => t.encoder.prompt_slots = parse_num(key, value)?,
        "model.use_positions" => t.encoder.use_positions = parse_bool(key, value)?,
        "model.pool_includes_prompt" => {
            t.encoder.pool_includes_prompt = parse_bool(key, value)?
        }
        "model.ln_eps" => t.encoder.ln_eps = parse_num(key, value)?,
        "tasks.count" => cfg.tasks.count = parse_num(key, value)?,
        "tasks.profile" => {
            cfg.tasks.profile = ConflictProfile::parse(value)
                .ok_or_else(|| anyhow!("{key}: expected none or conflict, got {value:?}"))?
        }
        "tasks.heldout" => cfg.tasks.heldout = parse_num(key, value)?,
        "tasks.train_per_task" => cfg.tasks.train_per_task = parse_num(key, value)?,
        "tasks.val_per_task" => cfg.tasks.val_per_task = parse_num(key, value)?,
        "tasks.test_per_task" => cfg.tasks.test_per_task = parse_num(key, value)?,
        "tasks.min_len" => cfg.tasks.min_len = parse_num(key, value)?,
        "tasks.max_len" => cfg.tasks.max_len = parse_num(key, value)?,
        "transfer.enabled" => cfg.transfer.enabled = parse_bool(key, value)?,
        "transfer.adapt_steps" => cfg.transfer.adapt_steps = parse_num(key, value)?,
        "sweep.temperature_grid" => {
            cfg.sweep.temperature_grid = parse_list(key, value, parse_num::<f64>)?
        }
        "sweep.task_grid" => {
            cfg.sweep.task_grid = parse_list(key, value, parse_num::<usize>)?
        }
        "sweep.repeats" => cfg.sweep.repeats = parse_num(key, value)?,
        "sweep.transfer" => cfg.sweep.transfer = parse_bool(key, value)?,
        _ => bail!("unknown key {key:?}"),
    }
    Ok(())
}

fn parse_list<T>(key: &str, value: &str, one: fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| one(key, v))
        .collect()
}
