//! Task loss weighting for multi-task training.
//!
//! The total objective is `sum_t lambda_t * L_t`. Lambdas are maintained
//! under the constraint `sum_t lambda_t = T` so the overall loss scale does
//! not drift when the strategy redistributes weight. The grad-norm strategy
//! targets weights proportional to the reciprocal of each task's probe
//! gradient norm, equalizing the per-task gradient contributions
//! `lambda_t * n_t`; targets are folded in through exponential smoothing.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaStrategy {
    /// Keep the initial uniform weights.
    Fixed,
    /// Weight by inverse probe gradient norm.
    GradNorm,
    /// Weight by inverse current loss.
    InverseLoss,
}

impl LambdaStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            LambdaStrategy::Fixed => "fixed",
            LambdaStrategy::GradNorm => "grad-norm",
            LambdaStrategy::InverseLoss => "inverse-loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(LambdaStrategy::Fixed),
            "grad-norm" => Some(LambdaStrategy::GradNorm),
            "inverse-loss" => Some(LambdaStrategy::InverseLoss),
            _ => None,
        }
    }
}

/// Inverse values renormalized to sum to `values.len()`. The floor keeps
/// vanishing inputs from producing unbounded weights.
pub fn inverse_normalized(values: &[f64], floor: f64) -> Vec<f64> {
    assert!(!values.is_empty(), "inverse_normalized: empty input");
    assert!(floor > 0.0, "inverse_normalized: floor must be positive");
    let raw: Vec<f64> = values.iter().map(|&v| 1.0 / v.max(floor)).collect();
    let sum: f64 = raw.iter().sum();
    let scale = values.len() as f64 / sum;
    raw.iter().map(|r| r * scale).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambdas: Vec<f64>,
    pub strategy: LambdaStrategy,
    /// Smoothing factor: weight kept by the previous lambdas per update.
    pub beta: f64,
    /// Floor for norms and losses entering a reciprocal.
    pub floor: f64,
}

impl LossWeights {
    pub fn uniform(tasks: usize, strategy: LambdaStrategy, beta: f64, floor: f64) -> Self {
        assert!(tasks > 0, "LossWeights: task count must be positive");
        LossWeights {
            lambdas: vec![1.0; tasks],
            strategy,
            beta,
            floor,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems: Vec<String> = Vec::new();
        if !(0.0..1.0).contains(&self.beta) {
            problems.push(String::from("lambda.beta must be in [0, 1)"));
        }
        if !(self.floor > 0.0) {
            problems.push(String::from("lambda.floor must be positive"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(problems.join("; ")))
        }
    }

    /// Folds this step's probe gradient norms and losses into the weights.
    /// Fixed strategy is a no-op. The result is renormalized so the sum
    /// constraint holds exactly after smoothing.
    pub fn update(&mut self, grad_norms: &[f64], losses: &[f64]) {
        let t = self.lambdas.len();
        assert_eq!(grad_norms.len(), t, "LossWeights::update: norm count");
        assert_eq!(losses.len(), t, "LossWeights::update: loss count");
        let target = match self.strategy {
            LambdaStrategy::Fixed => return,
            LambdaStrategy::GradNorm => inverse_normalized(grad_norms, self.floor),
            LambdaStrategy::InverseLoss => inverse_normalized(losses, self.floor),
        };
        for (l, tg) in self.lambdas.iter_mut().zip(target.iter()) {
            *l = self.beta * *l + (1.0 - self.beta) * tg;
        }
        let sum: f64 = self.lambdas.iter().sum();
        let scale = t as f64 / sum;
        for l in self.lambdas.iter_mut() {
            *l *= scale;
        }
    }

    /// `sum_t lambda_t * L_t`.
    pub fn aggregate(&self, losses: &[f64]) -> f64 {
        assert_eq!(
            losses.len(),
            self.lambdas.len(),
            "LossWeights::aggregate: loss count"
        );
        self.lambdas
            .iter()
            .zip(losses.iter())
            .map(|(l, x)| l * x)
            .sum()
    }
}
