//! Central finite-difference verification of tape gradients.
//!
//! The checker rebuilds the forward graph from scratch for every perturbed
//! coordinate, so it exercises graph construction as well as the kernels.
//! Gradients are compared with the symmetric relative error
//! `|a - n| / max(1e-4, |a| + |n|)`. The denominator floor absorbs the
//! roundoff inherent in central differences: at eps = 1e-5 the numeric
//! estimate of an O(1) objective carries about |f| * ulp / eps = 5e-12 of
//! absolute noise, which would dominate a pure relative comparison on
//! coordinates whose true gradient is itself tiny. With the floor, that
//! noise reports around 1e-7 while a genuine formula error on the same
//! coordinate (wrong sign, dropped term) still reports orders of magnitude
//! above the tolerance.

use alloc::vec::Vec;

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Step used for central differences throughout the crate.
pub const FD_EPSILON: f64 = 1e-5;

/// Error floor shared by all gradient checks.
pub const REL_TOL: f64 = 1e-6;

/// Denominator floor; see the module docs for the sizing argument.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(REL_FLOOR, a.abs() + b.abs())
}

/// Worst coordinate found by a check, for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<WorstCoordinate>,
}

/// Checks the gradient of a scalar-valued graph in every coordinate of
/// every input. `build` must construct the graph from the given leaf ids
/// and return the scalar root; it is called once per perturbation, so it
/// must be a pure function of the input tensors.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, build: F) -> GradCheck
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> (Tape, NodeId, Vec<NodeId>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let root = build(&mut tape, &ids);
        (tape, root, ids)
    };

    let (tape, root, ids) = eval(inputs);
    let grads = tape.backward(root);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| {
            grads
                .get(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; t.numel()])
        })
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let original = work[i].data[j];
            work[i].data[j] = original + eps;
            let (tp, rp, _) = eval(&work);
            let f_plus = tp.scalar_value(rp);
            work[i].data[j] = original - eps;
            let (tm, rm, _) = eval(&work);
            let f_minus = tm.scalar_value(rm);
            work[i].data[j] = original;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let err = relative_error(analytic[i][j], numeric);
            result.coordinates += 1;
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst = Some(WorstCoordinate {
                    input: i,
                    index: j,
                    analytic: analytic[i][j],
                    numeric,
                });
            }
        }
    }
    result
}

/// Deepest end-to-end check in the crate: a two-task, three-prompt,
/// one-layer model where the differentiated scalar is the weighted sum of
/// both task losses. Every learnable parameter is verified against central
/// differences, so scheduling, composition, fusion, the encoder and the
/// multi-task aggregate are all covered in one pass.
pub fn full_pipeline_check(seed: u64, eps: f64) -> GradCheck {
    use crate::model::{build_task_loss, EncoderConfig, ParamBinding, PinFlags};
    use crate::params::ModelState;
    use crate::tasks::{generate_tasks, ConflictProfile, Example};

    let cfg = EncoderConfig::tiny_for_tests();
    debug_assert_eq!(cfg.dim, 8);
    debug_assert_eq!(cfg.n_layers, 1);
    let suite = generate_tasks(2, seed, ConflictProfile::None)
        .expect("pipeline check: task generation");
    let state = ModelState::init(&cfg, 3, &suite, seed);
    let names = state.param_names();
    let mut inputs: Vec<Tensor> = Vec::new();
    state.visit_params(|_, t| inputs.push(t.clone()));
    let batches: Vec<Vec<&Example>> = suite
        .tasks
        .iter()
        .map(|t| t.train.iter().take(2).collect())
        .collect();
    // Uneven task weights so the aggregate is not a plain sum.
    let lambdas = [1.2, 0.8];
    let pins = PinFlags::none();

    grad_check(&inputs, eps, |tape, ids| {
        let binding = ParamBinding::from_parts(&names, ids);
        let losses: Vec<NodeId> = (0..2)
            .map(|pos| {
                build_task_loss(tape, &state, &binding, pos, &batches[pos], 0.9, &pins).loss
            })
            .collect();
        tape.lin_comb(&losses, &lambdas)
    })
}
