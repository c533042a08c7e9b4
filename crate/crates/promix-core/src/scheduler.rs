//! Softmax scheduling over a shared prompt pool.
//!
//! Each task owns a logit row `z_t` of length K. Its scheduling weights are
//! `softmax(z_t / tau)`; the composed prompt is the weight-averaged pool,
//! one convex combination per prompt slot coordinate. Lower temperature
//! sharpens the distribution, higher temperature flattens it.
//!
//! Everything here exists twice: a plain evaluation path used for
//! inspection, reports and test oracles, and tape builders used inside the
//! training graph. Both share the same stabilized softmax algorithm.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Shared pool of K prompts, each spanning `slots` positions of width `dim`.
/// Stored as one (K x slots*dim) matrix so a weight row composes it with a
/// single product.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    pub k: usize,
    pub slots: usize,
    pub dim: usize,
    pub values: Tensor,
}

impl PromptPool {
    /// Prompt `k` as a flat slots*dim slice.
    pub fn prompt(&self, k: usize) -> &[f64] {
        let w = self.slots * self.dim;
        &self.values.data[k * w..(k + 1) * w]
    }
}

/// Per-task scheduling logits; row `t` has length K and starts at zero so
/// every task begins with uniform attention over the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub rows: Vec<Tensor>,
}

impl SchedulerState {
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn k(&self) -> usize {
        self.rows.first().map(|r| r.numel()).unwrap_or(0)
    }
}

/// Convex combination of the pool under one task's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedPrompt {
    pub slots: usize,
    pub dim: usize,
    pub values: Tensor,
}

/// Pool entries are N(0, 1/sqrt(dim)); logits start at zero. The pool draws
/// from a stream named after the parameter so that unrelated consumers of
/// the same seed cannot disturb it.
pub fn init_scheduler(
    tasks: usize,
    k: usize,
    slots: usize,
    dim: usize,
    seed: u64,
) -> (PromptPool, SchedulerState) {
    assert!(k > 0, "init_scheduler: pool size must be positive");
    assert!(tasks > 0, "init_scheduler: task count must be positive");
    let mut values = Tensor::zeros(vec![k, slots * dim]);
    let std = 1.0 / math::sqrt(dim as f64);
    let mut rng = Rng::derive(seed, "param.pool", 0);
    rng.fill_normal(&mut values.data, std);
    let pool = PromptPool {
        k,
        slots,
        dim,
        values,
    };
    let rows = (0..tasks).map(|_| Tensor::zeros(vec![k])).collect();
    (pool, SchedulerState { rows })
}

/// Stabilized `softmax(z / tau)`. The row maximum is subtracted before
/// exponentiation, so extreme logits cannot overflow.
pub fn schedule_weights(z: &[f64], tau: f64) -> Vec<f64> {
    assert!(
        tau > 0.0 && tau.is_finite(),
        "schedule_weights: temperature must be positive and finite, got {tau}"
    );
    assert!(!z.is_empty(), "schedule_weights: empty logit row");
    let mut m = f64::NEG_INFINITY;
    for &v in z {
        m = m.max(v);
    }
    let mut out: Vec<f64> = z.iter().map(|&v| math::exp((v - m) / tau)).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

pub fn compose_prompt(weights: &[f64], pool: &PromptPool) -> ComposedPrompt {
    assert_eq!(
        weights.len(),
        pool.k,
        "compose_prompt: {} weights for pool of {}",
        weights.len(),
        pool.k
    );
    let width = pool.slots * pool.dim;
    let mut values = vec![0.0; width];
    for (k, &w) in weights.iter().enumerate() {
        let row = pool.prompt(k);
        for j in 0..width {
            values[j] += w * row[j];
        }
    }
    ComposedPrompt {
        slots: pool.slots,
        dim: pool.dim,
        values: Tensor::new(values, vec![pool.slots, pool.dim]),
    }
}

/// Shannon entropy in nats; `0 ln 0` counts as zero.
pub fn scheduling_entropy(weights: &[f64]) -> f64 {
    let mut h = 0.0;
    for &w in weights {
        if w > 0.0 {
            h -= w * math::ln(w);
        }
    }
    h
}

/// Tape twin of `schedule_weights`.
pub fn schedule_weights_node(tape: &mut Tape, z: NodeId, tau: f64) -> NodeId {
    tape.softmax_temp(z, tau)
}

/// Tape twin of `compose_prompt`; yields a (slots x dim) node.
pub fn compose_prompt_node(
    tape: &mut Tape,
    weights: NodeId,
    pool: NodeId,
    slots: usize,
    dim: usize,
) -> NodeId {
    let flat = tape.matmul(weights, pool);
    tape.reshape(flat, vec![slots, dim])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weights_match_frozen_softmax_example() {
        let w = schedule_weights(&[1.0, 2.0], 1.0);
        assert!((w[0] - 0.26894142).abs() < 1e-8);
        assert!((w[1] - 0.73105858).abs() < 1e-8);
    }

    #[test]
    fn entropy_matches_frozen_examples() {
        let uniform = [0.25; 4];
        assert!((scheduling_entropy(&uniform) - math::ln(4.0)).abs() < 1e-12);
        assert!((scheduling_entropy(&uniform) - 1.3862944).abs() < 1e-6);
        let two = [0.26894142, 0.73105858];
        assert!((scheduling_entropy(&two) - 0.5822).abs() < 1e-4);
        // One-hot rows carry no entropy.
        assert_eq!(scheduling_entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn init_is_reproducible_and_logits_start_at_zero() {
        let (pool_a, sched_a) = init_scheduler(3, 5, 4, 8, 42);
        let (pool_b, sched_b) = init_scheduler(3, 5, 4, 8, 42);
        assert_eq!(pool_a, pool_b);
        assert_eq!(sched_a, sched_b);
        for row in &sched_a.rows {
            assert!(row.data.iter().all(|&v| v == 0.0));
        }
        let (pool_c, _) = init_scheduler(3, 5, 4, 8, 43);
        assert_ne!(pool_a, pool_c);
    }

    #[test]
    fn zero_logits_compose_the_pool_mean() {
        let (pool, sched) = init_scheduler(2, 4, 3, 6, 7);
        let w = schedule_weights(&sched.rows[0].data, 0.9);
        for &wi in &w {
            assert!((wi - 0.25).abs() < 1e-15);
        }
        let composed = compose_prompt(&w, &pool);
        let width = pool.slots * pool.dim;
        for j in 0..width {
            let mean: f64 = (0..pool.k).map(|k| pool.prompt(k)[j]).sum::<f64>() / 4.0;
            assert!((composed.values.data[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_builders_agree_with_eval_path() {
        let (pool, _) = init_scheduler(1, 5, 2, 4, 11);
        let z = Tensor::new(alloc::vec![0.3, -1.0, 0.5, 2.0, 0.0], alloc::vec![5]);
        for &tau in &[0.5, 0.9, 1.3] {
            let w_eval = schedule_weights(&z.data, tau);
            let composed_eval = compose_prompt(&w_eval, &pool);

            let mut tape = Tape::new();
            let z_id = tape.leaf(&z);
            let pool_id = tape.leaf(&pool.values);
            let w_id = schedule_weights_node(&mut tape, z_id, tau);
            let c_id = compose_prompt_node(&mut tape, w_id, pool_id, pool.slots, pool.dim);
            for (a, b) in tape.value(w_id).iter().zip(w_eval.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
            for (a, b) in tape
                .value(c_id)
                .iter()
                .zip(composed_eval.values.data.iter())
            {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(tape.shape(c_id), &[pool.slots, pool.dim]);
        }
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution(
            z in proptest::collection::vec(-30.0f64..30.0, 1..12),
            tau in 0.05f64..5.0,
        ) {
            let w = schedule_weights(&z, tau);
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9, "sum {sum}");
            prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn composition_stays_in_the_per_coordinate_hull(
            z in proptest::collection::vec(-10.0f64..10.0, 2..6),
            seed in 0u64..1000,
            tau in 0.2f64..3.0,
        ) {
            let k = z.len();
            let (pool, _) = init_scheduler(1, k, 2, 3, seed);
            let w = schedule_weights(&z, tau);
            let composed = compose_prompt(&w, &pool);
            let width = pool.slots * pool.dim;
            for j in 0..width {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for kk in 0..k {
                    lo = lo.min(pool.prompt(kk)[j]);
                    hi = hi.max(pool.prompt(kk)[j]);
                }
                let v = composed.values.data[j];
                prop_assert!(
                    v >= lo - 1e-12 && v <= hi + 1e-12,
                    "coordinate {j}: {v} outside [{lo}, {hi}]"
                );
            }
        }

        #[test]
        fn entropy_is_monotone_in_temperature(
            z in proptest::collection::vec(-8.0f64..8.0, 2..8),
        ) {
            let grid = [0.5, 0.7, 0.9, 1.1, 1.3];
            let entropies: alloc::vec::Vec<f64> = grid
                .iter()
                .map(|&tau| scheduling_entropy(&schedule_weights(&z, tau)))
                .collect();
            for pair in entropies.windows(2) {
                prop_assert!(
                    pair[1] >= pair[0] - 1e-12,
                    "entropy decreased: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }
}
