//! SGD and Adam over named parameters.
//!
//! Optimizer state is keyed by parameter name, so the update of one
//! parameter never depends on which other parameters exist. Parameters
//! that received no gradient in a step are left untouched; their Adam
//! moments stay at zero, which makes "no gradient" and "exactly zero
//! gradient" equivalent.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

impl OptKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptKind::Sgd => "sgd",
            OptKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptKind::Sgd),
            "adam" => Some(OptKind::Adam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    pub kind: OptKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptConfig {
    pub fn default_adam() -> Self {
        OptConfig {
            kind: OptKind::Adam,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems: Vec<String> = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(String::from("opt.lr must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            problems.push(String::from("opt.beta1 must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            problems.push(String::from("opt.beta2 must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            problems.push(String::from("opt.eps must be positive"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-parameter update count for bias correction.
    t: u32,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptConfig,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(cfg: OptConfig) -> Self {
        cfg.validate().expect("Optimizer::new: invalid config");
        Optimizer {
            cfg,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to a single named parameter.
    pub fn update(&mut self, name: &str, value: &mut Tensor, grad: &[f64]) {
        assert_eq!(
            value.numel(),
            grad.len(),
            "optimizer: gradient length {} does not match parameter {name} ({})",
            grad.len(),
            value.numel()
        );
        match self.cfg.kind {
            OptKind::Sgd => {
                for (x, g) in value.data.iter_mut().zip(grad.iter()) {
                    *x -= self.cfg.lr * g;
                }
            }
            OptKind::Adam => {
                let n = value.numel();
                let slot = self
                    .moments
                    .entry(String::from(name))
                    .or_insert_with(|| Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        t: 0,
                    });
                assert_eq!(slot.m.len(), n, "optimizer: moment shape changed for {name}");
                slot.t += 1;
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let corr1 = 1.0 - math::powi(b1, slot.t as i32);
                let corr2 = 1.0 - math::powi(b2, slot.t as i32);
                for i in 0..n {
                    let g = grad[i];
                    slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                    slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                    let m_hat = slot.m[i] / corr1;
                    let v_hat = slot.v[i] / corr2;
                    value.data[i] -= self.cfg.lr * m_hat / (math::sqrt(v_hat) + self.cfg.eps);
                }
            }
        }
    }
}
