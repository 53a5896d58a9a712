//! SGD with momentum and learning-rate schedules.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 * (1 - t/T)^power`
    Poly { power: f64 },
    Constant,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Poly { power: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.99, schedule: LrSchedule::default() }
    }
}

impl OptimConfig {
    /// Learning rate for the update made after `done` of `total` steps.
    pub fn lr_at(&self, done: u64, total: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Poly { power } => {
                let frac = if total == 0 { 1.0 } else { done.min(total) as f64 / total as f64 };
                self.lr * libm::pow(1.0 - frac, power)
            }
        }
    }
}

/// Heavy-ball momentum: `v = mu v + g; theta -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, momentum: f64) -> Self {
        Self { momentum, velocity: vec![0.0; len] }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn load_velocity(&mut self, v: Vec<f64>) -> Result<()> {
        if v.len() != self.velocity.len() {
            return Err(shape_err(self.velocity.len(), v.len()));
        }
        self.velocity = v;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}
