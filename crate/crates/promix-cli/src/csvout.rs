//! CSV emission. Comma separators, one header row, '.' decimals, LF line
//! endings, and fully deterministic row order so reruns of the same config
//! are byte-identical. Floats are written with Rust's shortest round-trip
//! formatting. Task columns carry numeric ids, never names, so no field
//! ever needs quoting.

use promix_core::trainer::{MetricsReport, TransferReport};

fn push_row(out: &mut String, fields: &[String]) {
    for f in fields {
        debug_assert!(
            !f.contains(',') && !f.contains('\n'),
            "csv field needs quoting: {f:?}"
        );
    }
    out.push_str(&fields.join(","));
    out.push('\n');
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Long-format per-run metrics: `metric,step,task,value`. Traces first
/// (loss then entropy per step), then final per-task and macro summaries,
/// then baseline and transfer blocks when present.
pub fn metrics_csv(
    report: &MetricsReport,
    baseline: Option<&MetricsReport>,
    transfer: Option<&TransferReport>,
) -> String {
    let mut out = String::from("metric,step,task,value\n");
    let steps = report.steps;
    for step in 0..steps {
        for trace in &report.traces {
            push_row(
                &mut out,
                &[
                    "loss".into(),
                    step.to_string(),
                    trace.task_id.to_string(),
                    f(trace.losses[step]),
                ],
            );
        }
        for trace in &report.traces {
            push_row(
                &mut out,
                &[
                    "entropy".into(),
                    step.to_string(),
                    trace.task_id.to_string(),
                    f(trace.entropies[step]),
                ],
            );
        }
    }
    let fin = steps.to_string();
    for (i, &tid) in report.task_ids.iter().enumerate() {
        let t = tid.to_string();
        push_row(
            &mut out,
            &["val_accuracy".into(), fin.clone(), t.clone(), f(report.val_accuracy[i])],
        );
        push_row(
            &mut out,
            &["test_accuracy".into(), fin.clone(), t.clone(), f(report.test_accuracy[i])],
        );
        push_row(
            &mut out,
            &["mean_gate".into(), fin.clone(), t.clone(), f(report.mean_gates[i])],
        );
        push_row(
            &mut out,
            &["final_entropy".into(), fin.clone(), t.clone(), f(report.final_entropies[i])],
        );
        push_row(
            &mut out,
            &["lambda".into(), fin.clone(), t, f(report.lambdas[i])],
        );
    }
    push_row(
        &mut out,
        &["macro_val_accuracy".into(), fin.clone(), "all".into(), f(report.macro_val_accuracy)],
    );
    push_row(
        &mut out,
        &["macro_test_accuracy".into(), fin.clone(), "all".into(), f(report.macro_test_accuracy)],
    );

    if let Some(base) = baseline {
        for (i, &tid) in base.task_ids.iter().enumerate() {
            let t = tid.to_string();
            push_row(
                &mut out,
                &["baseline_val_accuracy".into(), fin.clone(), t.clone(), f(base.val_accuracy[i])],
            );
            push_row(
                &mut out,
                &["baseline_test_accuracy".into(), fin.clone(), t, f(base.test_accuracy[i])],
            );
        }
        push_row(
            &mut out,
            &[
                "baseline_macro_val_accuracy".into(),
                fin.clone(),
                "all".into(),
                f(base.macro_val_accuracy),
            ],
        );
        push_row(
            &mut out,
            &[
                "baseline_macro_test_accuracy".into(),
                fin.clone(),
                "all".into(),
                f(base.macro_test_accuracy),
            ],
        );
    }

    if let Some(tr) = transfer {
        for o in &tr.outcomes {
            let t = o.task_id.to_string();
            push_row(
                &mut out,
                &[
                    "transfer_scheduled_accuracy".into(),
                    fin.clone(),
                    t.clone(),
                    f(o.scheduled_accuracy),
                ],
            );
            push_row(
                &mut out,
                &[
                    "transfer_baseline_accuracy".into(),
                    fin.clone(),
                    t,
                    f(o.baseline_accuracy),
                ],
            );
        }
        push_row(
            &mut out,
            &["transfer_gain".into(), fin.clone(), "all".into(), f(tr.gain)],
        );
    }
    out
}

/// Loss rows only, for runs that aborted mid-training.
pub fn partial_metrics_csv(task_ids: &[usize], losses: &[Vec<f64>]) -> String {
    let mut out = String::from("metric,step,task,value\n");
    let steps = losses.iter().map(Vec::len).max().unwrap_or(0);
    for step in 0..steps {
        for (i, &tid) in task_ids.iter().enumerate() {
            if let Some(&v) = losses[i].get(step) {
                push_row(
                    &mut out,
                    &["loss".into(), step.to_string(), tid.to_string(), f(v)],
                );
            }
        }
    }
    out
}

/// Final scheduling weights, one row per task: `task,w0,...,w{K-1}`.
pub fn scheduler_weights_csv(report: &MetricsReport) -> String {
    let k = report.final_weights.first().map_or(0, Vec::len);
    let mut out = String::from("task");
    for i in 0..k {
        out.push_str(&format!(",w{i}"));
    }
    out.push('\n');
    for (i, &tid) in report.task_ids.iter().enumerate() {
        let mut fields = vec![tid.to_string()];
        fields.extend(report.final_weights[i].iter().map(|&w| f(w)));
        push_row(&mut out, &fields);
    }
    out
}

/// Gate summary per task: `task,mean_gate,weight_entropy`.
pub fn gates_csv(report: &MetricsReport) -> String {
    let mut out = String::from("task,mean_gate,weight_entropy\n");
    for (i, &tid) in report.task_ids.iter().enumerate() {
        push_row(
            &mut out,
            &[
                tid.to_string(),
                f(report.mean_gates[i]),
                f(report.final_entropies[i]),
            ],
        );
    }
    out
}

/// One sweep measurement point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Grid value as it should print (temperature "0.7", task count "8").
    pub value: String,
    pub seed: u64,
    pub macro_val_accuracy: f64,
    pub transfer_gain: Option<f64>,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    /// "temperature" or "task_count".
    pub variable: String,
    /// repeats consecutive rows per grid value, grid order.
    pub rows: Vec<SweepRow>,
    pub repeats: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Seed rows in grid-then-seed order, then one aggregate row per grid
/// value (seed column "mean") carrying means plus population standard
/// deviations in the `_std` columns. Optional fields print empty.
pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = String::from(
        "variable,value,seed,macro_val_accuracy,transfer_gain,mean_entropy,\
         macro_val_accuracy_std,transfer_gain_std,mean_entropy_std\n",
    );
    let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
    for group in table.rows.chunks(table.repeats) {
        for row in group {
            push_row(
                &mut out,
                &[
                    table.variable.clone(),
                    row.value.clone(),
                    row.seed.to_string(),
                    f(row.macro_val_accuracy),
                    opt(row.transfer_gain),
                    f(row.mean_entropy),
                    String::new(),
                    String::new(),
                    String::new(),
                ],
            );
        }
        let (acc_m, acc_s) = mean_std(
            &group
                .iter()
                .map(|r| r.macro_val_accuracy)
                .collect::<Vec<_>>(),
        );
        let (ent_m, ent_s) =
            mean_std(&group.iter().map(|r| r.mean_entropy).collect::<Vec<_>>());
        let gains: Vec<f64> = group.iter().filter_map(|r| r.transfer_gain).collect();
        let gain_agg = if gains.len() == group.len() {
            let (m, s) = mean_std(&gains);
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        push_row(
            &mut out,
            &[
                table.variable.clone(),
                group[0].value.clone(),
                "mean".into(),
                f(acc_m),
                opt(gain_agg.0),
                f(ent_m),
                f(acc_s),
                opt(gain_agg.1),
                f(ent_s),
            ],
        );
    }
    out
}
