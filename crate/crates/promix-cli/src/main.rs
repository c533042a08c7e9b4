//! Experiment harness for the prompt-scheduling laboratory.
//!
//! Every failure path prints a single `error: ...` line to stderr and
//! exits nonzero: 2 for configuration problems, 3 for training divergence
//! (partial traces are saved first), 1 otherwise.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use promix_cli::{checkpoint, config::ExperimentConfig, runner};
use promix_core::gradcheck::{full_pipeline_check, FD_EPSILON, REL_TOL};
use promix_core::CoreError;

#[derive(Parser)]
#[command(
    name = "promix",
    about = "Train and probe a prompt-scheduling model on synthetic multi-task suites"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Key-value config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train once and write metrics, scheduler weights, gates and a checkpoint.
    Run(CommonArgs),
    /// Train across the temperature grid and write sweep.csv.
    SweepTemp {
        #[command(flatten)]
        common: CommonArgs,
        /// Parallel worker threads for grid points.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train across the task-count grid and write sweep.csv.
    SweepTasks {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print a checkpoint's manifest and per-parameter summary.
    InspectCheckpoint {
        /// Checkpoint directory (containing manifest.txt and params.bin).
        path: PathBuf,
    },
    /// Finite-difference check of the full training gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default_desk(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let started = Instant::now();
    match runner::execute_run(&cfg) {
        Ok(outcome) => {
            let secs = started.elapsed().as_secs_f64();
            runner::write_run_outputs(&common.out, &cfg, &outcome)?;
            let r = &outcome.report;
            println!(
                "trained {} tasks for {} steps in {secs:.2}s",
                r.task_ids.len(),
                r.steps
            );
            println!("macro val accuracy: {:.4}", r.macro_val_accuracy);
            println!("macro test accuracy: {:.4}", r.macro_test_accuracy);
            if let Some(base) = &outcome.baseline {
                println!(
                    "baseline (single prompt) macro val accuracy: {:.4}",
                    base.macro_val_accuracy
                );
            }
            if let Some(tr) = &outcome.transfer {
                println!(
                    "transfer gain: {:.4} (scheduled {:.4} vs baseline {:.4})",
                    tr.gain, tr.scheduled_mean, tr.baseline_mean
                );
            }
            println!("outputs: {}", common.out.display());
            Ok(())
        }
        Err(CoreError::Diverged {
            step,
            message,
            partial_losses,
        }) => {
            runner::write_divergence_outputs(
                &common.out,
                &cfg,
                &runner::training_task_ids(&cfg),
                &partial_losses,
            )?;
            Err(CoreError::Diverged {
                step,
                message,
                partial_losses: Vec::new(),
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_sweep(common: &CommonArgs, workers: usize, temperature: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let started = Instant::now();
    let table = if temperature {
        runner::sweep_temperature(&cfg, workers)?
    } else {
        runner::sweep_task_count(&cfg, workers)?
    };
    runner::write_sweep_outputs(&common.out, &cfg, &table)?;
    println!(
        "swept {} over {} points x {} seeds in {:.2}s",
        table.variable,
        table.rows.len() / table.repeats,
        table.repeats,
        started.elapsed().as_secs_f64()
    );
    println!("outputs: {}", common.out.display());
    Ok(())
}

fn cmd_inspect(path: &PathBuf) -> Result<()> {
    let ckpt = checkpoint::load(path)?;
    print!("{}", checkpoint::describe(&ckpt));
    Ok(())
}

fn cmd_grad_check(seed: u64) -> Result<()> {
    let started = Instant::now();
    let check = full_pipeline_check(seed, FD_EPSILON);
    println!("coordinates: {}", check.coordinates);
    println!("max relative error: {:e}", check.max_rel_error);
    println!("tolerance: {REL_TOL:e}");
    println!("elapsed: {:.2}s", started.elapsed().as_secs_f64());
    if check.max_rel_error <= REL_TOL {
        println!("gradient check: PASS");
        Ok(())
    } else {
        anyhow::bail!(
            "gradient check failed: max relative error {:e} (worst {:?})",
            check.max_rel_error,
            check.worst
        )
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Run(common) => cmd_run(common),
        Cmd::SweepTemp { common, workers } => cmd_sweep(common, *workers, true),
        Cmd::SweepTasks { common, workers } => cmd_sweep(common, *workers, false),
        Cmd::InspectCheckpoint { path } => cmd_inspect(path),
        Cmd::GradCheck { seed } => cmd_grad_check(*seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<CoreError>() {
                Some(CoreError::Diverged { .. }) => 3,
                Some(CoreError::InvalidConfig(_)) => 2,
                _ if e.to_string().starts_with("invalid config") => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
