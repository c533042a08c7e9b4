//! Executes runs and sweeps and writes their artifacts.
//!
//! A "run" trains the scheduled model on the training tasks and, when
//! transfer is enabled, also trains a single-prompt baseline (k = 1, same
//! data and seed) and adapts both to the held-out tasks under equal
//! budgets. Sweeps repeat runs over a grid with per-repeat seeds
//! `base_seed + r`. Grid points may execute on worker threads; rows are
//! merged in grid-then-seed order no matter which worker finishes first,
//! so the emitted CSV does not depend on scheduling.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use promix_core::params::ModelState;
use promix_core::tasks::{GenSpec, TaskSuite};
use promix_core::trainer::{train, transfer_gain, MetricsReport, TransferReport};
use promix_core::CoreError;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::csvout::{self, SweepRow, SweepTable};

pub struct RunOutcome {
    pub state: ModelState,
    pub report: MetricsReport,
    pub baseline: Option<MetricsReport>,
    pub transfer: Option<TransferReport>,
}

/// Generates training plus held-out tasks in one deterministic suite.
fn build_suites(cfg: &ExperimentConfig) -> Result<(TaskSuite, Option<TaskSuite>), CoreError> {
    let heldout = if cfg.transfer.enabled {
        cfg.tasks.heldout
    } else {
        0
    };
    let total = cfg.tasks.count + heldout;
    let mut spec = GenSpec::new(total, cfg.train.seed, cfg.tasks.profile);
    spec.train_per_task = cfg.tasks.train_per_task;
    spec.val_per_task = cfg.tasks.val_per_task;
    spec.test_per_task = cfg.tasks.test_per_task;
    spec.min_len = cfg.tasks.min_len;
    spec.max_len = cfg.tasks.max_len;
    let full = promix_core::tasks::generate_tasks_with(&spec)?;
    let train_ids: Vec<usize> = (0..cfg.tasks.count).collect();
    let train_suite = full.subset(&train_ids);
    let heldout_suite = if heldout > 0 {
        let ids: Vec<usize> = (cfg.tasks.count..total).collect();
        Some(full.subset(&ids))
    } else {
        None
    };
    Ok((train_suite, heldout_suite))
}

pub fn execute_run(cfg: &ExperimentConfig) -> Result<RunOutcome, CoreError> {
    let (train_suite, heldout_suite) = build_suites(cfg)?;
    let (state, report) = train(&cfg.train, &train_suite)?;

    let mut baseline = None;
    let mut transfer = None;
    if let Some(heldout) = heldout_suite {
        let mut base_cfg = cfg.train.clone();
        base_cfg.k = 1;
        let (base_state, base_report) = train(&base_cfg, &train_suite)?;
        let tr = transfer_gain(
            &cfg.train,
            &state,
            &base_cfg,
            &base_state,
            &heldout,
            cfg.transfer.adapt_steps,
        )?;
        baseline = Some(base_report);
        transfer = Some(tr);
    }
    Ok(RunOutcome {
        state,
        report,
        baseline,
        transfer,
    })
}

/// Writes metrics.csv, scheduler_weights.csv, gates.csv, the checkpoint
/// and the resolved-config echo under `out`.
pub fn write_run_outputs(out: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating output dir {}", out.display()))?;
    let resolved = cfg.to_key_values();
    fs::write(out.join("resolved_config.txt"), &resolved).context("writing config echo")?;
    fs::write(
        out.join("metrics.csv"),
        csvout::metrics_csv(
            &outcome.report,
            outcome.baseline.as_ref(),
            outcome.transfer.as_ref(),
        ),
    )
    .context("writing metrics.csv")?;
    fs::write(
        out.join("scheduler_weights.csv"),
        csvout::scheduler_weights_csv(&outcome.report),
    )
    .context("writing scheduler_weights.csv")?;
    fs::write(out.join("gates.csv"), csvout::gates_csv(&outcome.report))
        .context("writing gates.csv")?;
    checkpoint::save(
        &out.join("checkpoint"),
        &outcome.state,
        outcome.report.steps,
        &checkpoint::config_hash(&resolved),
    )?;
    Ok(())
}

/// Saves what a diverged run produced before failing: the partial loss
/// traces and the config echo that reproduces the failure.
pub fn write_divergence_outputs(
    out: &Path,
    cfg: &ExperimentConfig,
    task_ids: &[usize],
    partial_losses: &[Vec<f64>],
) -> Result<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating output dir {}", out.display()))?;
    fs::write(out.join("resolved_config.txt"), cfg.to_key_values())
        .context("writing config echo")?;
    fs::write(
        out.join("metrics.csv"),
        csvout::partial_metrics_csv(task_ids, partial_losses),
    )
    .context("writing partial metrics.csv")?;
    Ok(())
}

/// Training task ids, needed to label partial traces after a divergence.
pub fn training_task_ids(cfg: &ExperimentConfig) -> Vec<usize> {
    (0..cfg.tasks.count).collect()
}

fn sweep_point_row(cfg: &ExperimentConfig, value: String, seed: u64) -> Result<SweepRow, CoreError> {
    let outcome = execute_run(cfg)?;
    Ok(SweepRow {
        value,
        seed,
        macro_val_accuracy: outcome.report.macro_val_accuracy,
        transfer_gain: outcome.transfer.as_ref().map(|t| t.gain),
        mean_entropy: outcome.report.mean_final_entropy(),
    })
}

/// One prepared sweep job: the fully resolved config for a (value, seed)
/// grid point plus its printable grid value.
struct SweepJob {
    cfg: ExperimentConfig,
    value: String,
    seed: u64,
}

fn run_jobs(jobs: Vec<SweepJob>, workers: usize) -> Result<Vec<SweepRow>, CoreError> {
    let n = jobs.len();
    if workers <= 1 {
        return jobs
            .into_iter()
            .map(|j| sweep_point_row(&j.cfg, j.value, j.seed))
            .collect();
    }
    let slots: Mutex<Vec<Option<Result<SweepRow, CoreError>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let jobs_ref = &jobs;
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let j = &jobs_ref[i];
                let row = sweep_point_row(&j.cfg, j.value.clone(), j.seed);
                slots.lock().unwrap()[i] = Some(row);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("sweep job not executed"))
        .collect()
}

pub fn sweep_temperature(
    cfg: &ExperimentConfig,
    workers: usize,
) -> Result<SweepTable, CoreError> {
    let mut jobs = Vec::new();
    for &tau in &cfg.sweep.temperature_grid {
        for r in 0..cfg.sweep.repeats {
            let mut point = cfg.clone();
            point.train.tau = tau;
            point.train.seed = cfg.train.seed + r as u64;
            point.transfer.enabled = cfg.sweep.transfer;
            jobs.push(SweepJob {
                value: tau.to_string(),
                seed: point.train.seed,
                cfg: point,
            });
        }
    }
    Ok(SweepTable {
        variable: "temperature".into(),
        rows: run_jobs(jobs, workers)?,
        repeats: cfg.sweep.repeats,
    })
}

pub fn sweep_task_count(
    cfg: &ExperimentConfig,
    workers: usize,
) -> Result<SweepTable, CoreError> {
    let mut jobs = Vec::new();
    for &count in &cfg.sweep.task_grid {
        for r in 0..cfg.sweep.repeats {
            let mut point = cfg.clone();
            point.tasks.count = count;
            point.train.seed = cfg.train.seed + r as u64;
            point.transfer.enabled = cfg.sweep.transfer;
            jobs.push(SweepJob {
                value: count.to_string(),
                seed: point.train.seed,
                cfg: point,
            });
        }
    }
    Ok(SweepTable {
        variable: "task_count".into(),
        rows: run_jobs(jobs, workers)?,
        repeats: cfg.sweep.repeats,
    })
}

pub fn write_sweep_outputs(out: &Path, cfg: &ExperimentConfig, table: &SweepTable) -> Result<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating output dir {}", out.display()))?;
    fs::write(out.join("resolved_config.txt"), cfg.to_key_values())
        .context("writing config echo")?;
    fs::write(out.join("sweep.csv"), csvout::sweep_csv(table)).context("writing sweep.csv")?;
    Ok(())
}
