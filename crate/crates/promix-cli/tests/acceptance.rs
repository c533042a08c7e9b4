//! The release gate. Each test stands for one shipped claim, prints a
//! single `ACCEPTANCE <n> <name>: PASS (...)` line (visible under
//! `--nocapture`) and enforces that claim's tolerance and runtime budget.
//!
//! Tests serialize on a mutex: most of them time real training, and
//! letting them share the machine would charge one criterion for
//! another's work.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use promix_cli::config::ExperimentConfig;
use promix_cli::{checkpoint, runner};
use promix_core::gradcheck::{full_pipeline_check, FD_EPSILON, REL_TOL};
use promix_core::model::{EncoderConfig, PinFlags};
use promix_core::params::{ModelState, TrainScope};
use promix_core::rng::Rng;
use promix_core::scheduler::{compose_prompt, init_scheduler, schedule_weights, scheduling_entropy};
use promix_core::tasks::{generate_tasks, ConflictProfile};
use promix_core::tensor::Tensor;
use promix_core::trainer::{train_scoped, TrainConfig};
use promix_core::weights::inverse_normalized;
use promix_core::fusion::{fuse, gate_vector};
use tempfile::TempDir;

static GATE: Mutex<()> = Mutex::new(());

const TAU_GRID: [f64; 5] = [0.5, 0.7, 0.9, 1.1, 1.3];

/// Runs one criterion, prints its verdict line, enforces its wall-clock
/// budget. `check` returns a short PASS detail or an explanation of what
/// broke.
fn criterion(
    n: usize,
    name: &str,
    budget_secs: Option<f64>,
    check: impl FnOnce() -> Result<String, String>,
) {
    let _serial = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let started = Instant::now();
    let outcome = check();
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("ACCEPTANCE {n} {name}: PASS ({detail}; {secs:.1}s)");
            if let Some(budget) = budget_secs {
                assert!(
                    secs < budget,
                    "criterion {n} ({name}) passed but took {secs:.1}s, budget {budget}s"
                );
            }
        }
        Err(why) => {
            println!("ACCEPTANCE {n} {name}: FAIL ({why})");
            panic!("criterion {n} ({name}): {why}");
        }
    }
}

#[test]
fn a1_gradient_fidelity() {
    criterion(1, "gradient_fidelity", Some(10.0), || {
        assert_eq!(REL_TOL, 1e-6, "shipped tolerance drifted from the gate");
        let check = full_pipeline_check(0, FD_EPSILON);
        if check.max_rel_error <= 1e-6 {
            Ok(format!(
                "max rel err {:.2e} over {} coordinates at eps {FD_EPSILON:.0e}",
                check.max_rel_error, check.coordinates
            ))
        } else {
            Err(format!(
                "max rel err {:.2e} > 1e-6 (worst {:?})",
                check.max_rel_error, check.worst
            ))
        }
    });
}

#[test]
fn a2_scheduling_invariants() {
    criterion(2, "scheduling_invariants", Some(5.0), || {
        for trial in 0..1000u64 {
            let mut rng = Rng::derive(41, "accept.sched", trial);
            let k = 2 + rng.next_below(7);
            let slots = 1 + rng.next_below(3);
            let dim = 1 + rng.next_below(6);
            let (pool, _) = init_scheduler(1, k, slots, dim, trial);
            let z: Vec<f64> = (0..k).map(|_| rng.next_normal()).collect();

            let mut entropies = Vec::new();
            for &tau in &TAU_GRID {
                let w = schedule_weights(&z, tau);
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(format!("trial {trial}: weights sum {sum} off by >1e-9"));
                }
                let composed = compose_prompt(&w, &pool);
                for s in 0..slots {
                    for j in 0..dim {
                        let coords: Vec<f64> =
                            (0..k).map(|r| pool.values.data[(r * slots + s) * dim + j]).collect();
                        let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let v = composed.values.data[s * dim + j];
                        if v < lo - 1e-12 || v > hi + 1e-12 {
                            return Err(format!(
                                "trial {trial}: composed[{s},{j}]={v} outside hull [{lo},{hi}]"
                            ));
                        }
                    }
                }
                entropies.push(scheduling_entropy(&w));
            }
            if !entropies.windows(2).all(|p| p[0] < p[1]) {
                return Err(format!("trial {trial}: entropy not monotone: {entropies:?}"));
            }
        }
        Ok("1000 trials: row sums 1e-9, hull 1e-12, entropy monotone in tau".into())
    });
}

#[test]
fn a3_fusion_invariants() {
    criterion(3, "fusion_invariants", Some(5.0), || {
        for trial in 0..1000u64 {
            let mut rng = Rng::derive(43, "accept.fuse", trial);
            let k = 2 + rng.next_below(4);
            let slots = 1 + rng.next_below(3);
            let dim = 1 + rng.next_below(6);
            let (pool, _) = init_scheduler(1, k, slots, dim, trial);
            let w = schedule_weights(
                &(0..k).map(|_| rng.next_normal()).collect::<Vec<_>>(),
                0.9,
            );
            let composed = compose_prompt(&w, &pool);
            let e: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();

            let mut wg_data = vec![0.0; dim * dim];
            rng.fill_normal(&mut wg_data, 0.7);
            let gate = gate_vector(&Tensor::new(wg_data, vec![dim, dim]), &e);
            let fused = fuse(&gate, &composed, &e);
            for s in 0..slots {
                for j in 0..dim {
                    let c = composed.values.data[s * dim + j];
                    let v = fused.values.data[s * dim + j];
                    let (lo, hi) = if c < e[j] { (c, e[j]) } else { (e[j], c) };
                    if v < lo - 1e-12 || v > hi + 1e-12 {
                        return Err(format!(
                            "trial {trial}: fused[{s},{j}]={v} not between prompt {c} and embedding {}",
                            e[j]
                        ));
                    }
                }
            }

            // Zero gate weights must blend both sources exactly half-half.
            let half = gate_vector(&Tensor::zeros(vec![dim, dim]), &e);
            if half.iter().any(|&g| g != 0.5) {
                return Err(format!("trial {trial}: zero-weight gate is {half:?}, not 0.5"));
            }
            let blended = fuse(&half, &composed, &e);
            for s in 0..slots {
                for j in 0..dim {
                    let expect = 0.5 * composed.values.data[s * dim + j] + 0.5 * e[j];
                    if blended.values.data[s * dim + j] != expect {
                        return Err(format!("trial {trial}: 0.5 blend is not exact"));
                    }
                }
            }
        }
        Ok("1000 trials: betweenness 1e-12, zero gate gives the exact half blend".into())
    });
}

#[test]
fn a4_lambda_oracle() {
    criterion(4, "lambda_oracle", Some(1.0), || {
        let lambdas = inverse_normalized(&[2.0, 4.0], 1e-8);
        if (lambdas[0] - 4.0 / 3.0).abs() > 1e-12 || (lambdas[1] - 2.0 / 3.0).abs() > 1e-12 {
            return Err(format!("norms [2,4] gave {lambdas:?}, want [4/3, 2/3]"));
        }
        for trial in 0..100u64 {
            let mut rng = Rng::derive(47, "accept.lambda", trial);
            let t = 2 + rng.next_below(7);
            let norms: Vec<f64> = (0..t).map(|_| 0.05 + 4.0 * rng.next_f64()).collect();
            let l = inverse_normalized(&norms, 1e-8);
            let products: Vec<f64> = l.iter().zip(&norms).map(|(a, b)| a * b).collect();
            let mean = products.iter().sum::<f64>() / t as f64;
            let residual = products
                .iter()
                .map(|p| (p - mean).abs() / mean)
                .fold(0.0, f64::max);
            if residual > 1e-6 {
                return Err(format!(
                    "trial {trial}: equalization residual {residual:.2e} > 1e-6"
                ));
            }
        }
        Ok("[2,4] -> [4/3, 2/3] within 1e-12; residual <= 1e-6 on 100 norm vectors".into())
    });
}

#[test]
fn a5_reduction_equivalence() {
    criterion(5, "reduction_equivalence", Some(120.0), || {
        let seed = 42;
        let steps = 200;
        let t_count = 3;
        let suite = generate_tasks(t_count, seed, ConflictProfile::None)
            .map_err(|e| e.to_string())?;

        let pinned = |k: usize| {
            let mut cfg = TrainConfig::default_desk();
            cfg.seed = seed;
            cfg.steps = steps;
            cfg.batch_size = 4;
            cfg.k = k;
            cfg.encoder = EncoderConfig::tiny_for_tests();
            cfg.lambda_strategy = promix_core::weights::LambdaStrategy::Fixed;
            cfg.freeze_backbone = true;
            cfg.pins = PinFlags {
                one_hot_schedule: true,
                gate_open: true,
            };
            cfg
        };

        let joint_cfg = pinned(t_count);
        let joint_init = ModelState::init(&joint_cfg.encoder, t_count, &suite, seed);
        let initial_pool = joint_init.param("pool").unwrap().clone();
        let (joint_state, joint_report) =
            train_scoped(&joint_cfg, &suite, joint_init, &TrainScope::FreezeBackbone)
                .map_err(|e| e.to_string())?;

        let width = initial_pool.cols();
        for t in 0..t_count {
            let solo_cfg = pinned(1);
            let sub = suite.subset(&[t]);
            let mut solo = ModelState::init(&solo_cfg.encoder, 1, &sub, seed);
            let row = Tensor::new(
                initial_pool.data[t * width..(t + 1) * width].to_vec(),
                vec![1, width],
            );
            assert!(solo.set_param("pool", &row));
            let (solo_state, solo_report) =
                train_scoped(&solo_cfg, &sub, solo, &TrainScope::FreezeBackbone)
                    .map_err(|e| e.to_string())?;

            if joint_report.traces[t].losses != solo_report.traces[0].losses {
                return Err(format!("task {t}: joint and isolated loss traces differ"));
            }
            let head = format!("head.{t}");
            if joint_state.param(&head) != solo_state.param(&head) {
                return Err(format!("task {t}: final heads differ"));
            }
            let joint_pool = joint_state.param("pool").unwrap();
            let solo_pool = solo_state.param("pool").unwrap();
            if joint_pool.data[t * width..(t + 1) * width] != solo_pool.data[..] {
                return Err(format!("task {t}: final pool rows differ"));
            }
        }
        Ok(format!(
            "{t_count} tasks x {steps} steps: loss traces, heads and pool rows bit-equal"
        ))
    });
}

#[test]
fn a6_negative_transfer() {
    criterion(6, "negative_transfer", Some(600.0), || {
        let path = Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../experiments/negative_transfer.kv");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        let base = ExperimentConfig::parse(&text).map_err(|e| e.to_string())?;
        if base.tasks.count != 8 || base.tasks.heldout != 2 {
            return Err("experiment file drifted from the 8-task, 2-held-out protocol".into());
        }

        let mut val_wins = 0;
        let mut gain_wins = 0;
        let mut gains = String::new();
        for seed in 0..5 {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.validate().map_err(|e| e.to_string())?;
            let outcome = runner::execute_run(&cfg).map_err(|e| e.to_string())?;
            let sched = outcome.report.macro_val_accuracy;
            let baseline = outcome.baseline.expect("transfer run has a baseline");
            let transfer = outcome.transfer.expect("transfer run has a gain");
            if sched > baseline.macro_val_accuracy {
                val_wins += 1;
            }
            if transfer.gain > 1.0 {
                gain_wins += 1;
            }
            let _ = write!(gains, " {:.3}", transfer.gain);
        }
        if val_wins >= 4 && gain_wins >= 4 {
            Ok(format!(
                "macro-val wins {val_wins}/5, transfer gain > 1 in {gain_wins}/5 (gains{gains})"
            ))
        } else {
            Err(format!(
                "macro-val wins {val_wins}/5, gain wins {gain_wins}/5; need 4/5 each (gains{gains})"
            ))
        }
    });
}

#[test]
fn a7_temperature_trend() {
    criterion(7, "temperature_trend", None, || {
        let cfg = ExperimentConfig::default_desk();
        assert_eq!(cfg.sweep.temperature_grid, TAU_GRID.to_vec());
        assert_eq!(cfg.sweep.repeats, 5);
        let table = runner::sweep_temperature(&cfg, 1).map_err(|e| e.to_string())?;
        let reps = cfg.sweep.repeats;

        // Rows arrive in grid-then-seed order; chunk them back per tau.
        let rows = &table.rows;
        let means: Vec<f64> = rows
            .chunks(reps)
            .map(|g| g.iter().map(|r| r.macro_val_accuracy).sum::<f64>() / reps as f64)
            .collect();
        let argmax = means
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        if argmax == 0 || argmax == TAU_GRID.len() - 1 {
            return Err(format!(
                "seed-mean accuracy peaks at tau={}, an endpoint: {means:?}",
                TAU_GRID[argmax]
            ));
        }
        for s in 0..reps {
            let ents: Vec<f64> = rows
                .chunks(reps)
                .map(|g| g[s].mean_entropy)
                .collect();
            if !ents.windows(2).all(|p| p[0] < p[1]) {
                return Err(format!("seed {s}: entropy column not strictly increasing: {ents:?}"));
            }
        }
        Ok(format!(
            "peak at tau={} (means {:?}), entropy strictly increasing for all {} seeds",
            TAU_GRID[argmax],
            means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>(),
            reps
        ))
    });
}

#[test]
fn a8_task_count_trend() {
    criterion(8, "task_count_trend", None, || {
        let cfg = ExperimentConfig::default_desk();
        assert_eq!(cfg.sweep.task_grid, vec![2, 4, 8, 12, 16]);
        let table = runner::sweep_task_count(&cfg, 1).map_err(|e| e.to_string())?;
        let reps = cfg.sweep.repeats;
        let rows = &table.rows;
        let means: Vec<f64> = rows
            .chunks(reps)
            .map(|g| g.iter().map(|r| r.macro_val_accuracy).sum::<f64>() / reps as f64)
            .collect();

        // Interior grid points are indices 1..=3 (counts 4, 8, 12).
        let best_interior = (1..=3).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
        let largest = cfg.sweep.task_grid.len() - 1;
        let wins = (0..reps)
            .filter(|&s| {
                rows[best_interior * reps + s].macro_val_accuracy
                    > rows[largest * reps + s].macro_val_accuracy
            })
            .count();
        if wins >= 3 {
            Ok(format!(
                "T={} beats T=16 in {wins}/5 seeds (means {:?})",
                cfg.sweep.task_grid[best_interior],
                means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>()
            ))
        } else {
            Err(format!(
                "best interior T={} beats T=16 in only {wins}/5 seeds (means {means:?})",
                cfg.sweep.task_grid[best_interior]
            ))
        }
    });
}

#[test]
fn a9_determinism() {
    criterion(9, "determinism", None, || {
        let mut cfg = ExperimentConfig::default_desk();
        cfg.train.steps = 60;
        cfg.tasks.count = 2;
        cfg.tasks.heldout = 1;
        cfg.transfer.adapt_steps = 40;
        cfg.validate().map_err(|e| e.to_string())?;

        let dirs = [TempDir::new().unwrap(), TempDir::new().unwrap()];
        for dir in &dirs {
            let outcome = runner::execute_run(&cfg).map_err(|e| e.to_string())?;
            runner::write_run_outputs(dir.path(), &cfg, &outcome).map_err(|e| e.to_string())?;
        }
        for name in [
            "metrics.csv",
            "scheduler_weights.csv",
            "gates.csv",
            "resolved_config.txt",
        ] {
            let a = std::fs::read(dirs[0].path().join(name)).unwrap();
            let b = std::fs::read(dirs[1].path().join(name)).unwrap();
            if a != b {
                return Err(format!("{name} differs between repeated runs"));
            }
        }

        let mut sweep_cfg = cfg.clone();
        sweep_cfg.sweep.temperature_grid = vec![0.7, 1.1];
        sweep_cfg.sweep.task_grid = vec![1, 2];
        sweep_cfg.sweep.repeats = 2;
        let temp_a = runner::sweep_temperature(&sweep_cfg, 1).map_err(|e| e.to_string())?;
        let temp_b = runner::sweep_temperature(&sweep_cfg, 2).map_err(|e| e.to_string())?;
        if promix_cli::csvout::sweep_csv(&temp_a) != promix_cli::csvout::sweep_csv(&temp_b) {
            return Err("temperature sweep CSV differs between repeats/worker counts".into());
        }
        let tasks_a = runner::sweep_task_count(&sweep_cfg, 1).map_err(|e| e.to_string())?;
        let tasks_b = runner::sweep_task_count(&sweep_cfg, 1).map_err(|e| e.to_string())?;
        if promix_cli::csvout::sweep_csv(&tasks_a) != promix_cli::csvout::sweep_csv(&tasks_b) {
            return Err("task sweep CSV differs between repeats".into());
        }

        // Checkpoint round-trip: every parameter must come back bit-exact.
        let outcome = runner::execute_run(&cfg).map_err(|e| e.to_string())?;
        let dir = TempDir::new().unwrap();
        let hash = checkpoint::config_hash(&cfg.to_key_values());
        checkpoint::save(dir.path(), &outcome.state, cfg.train.steps, &hash)
            .map_err(|e| e.to_string())?;
        let loaded = checkpoint::load(dir.path()).map_err(|e| e.to_string())?;
        let mut restored = outcome.state.clone();
        loaded.apply_to(&mut restored).map_err(|e| e.to_string())?;
        if restored != outcome.state {
            return Err("checkpoint round-trip changed parameters".into());
        }
        let mut names = 0;
        outcome.state.visit_params(|name, tensor| {
            names += 1;
            assert_eq!(
                loaded.param(name).map(|t| &t.data),
                Some(&tensor.data),
                "checkpoint parameter {name} not bit-exact"
            );
        });
        Ok(format!(
            "rerun CSVs byte-identical, sweeps stable across worker counts, {names}-parameter checkpoint round-trip bit-exact"
        ))
    });
}
