//! Adam updates for the master factor matrices.
//!
//! Bias correction divides by the constant `(1 − β₁)` and `(1 − β₂)` rather than
//! the step-dependent `(1 − βᵗ)` of the usual formulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    /// Learning rate γ.
    pub gamma: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(beta1: f64, beta2: f64, gamma: f64, epsilon: f64) -> Result<Self> {
        let cfg = AdamConfig {
            beta1,
            beta2,
            gamma,
            epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub(crate) fn problems(&self) -> Vec<String> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        let mut out = Vec::new();
        if !open(self.beta1) {
            out.push(format!("beta1 must lie in (0, 1) (got {})", self.beta1));
        }
        if !open(self.beta2) {
            out.push(format!("beta2 must lie in (0, 1) (got {})", self.beta2));
        }
        if !open(self.gamma) {
            out.push(format!("gamma must lie in (0, 1) (got {})", self.gamma));
        }
        if !(self.epsilon > 0.0) {
            out.push(format!("epsilon must be > 0 (got {})", self.epsilon));
        }
        out
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.1,
            beta2: 0.98,
            gamma: 0.1,
            epsilon: 0.0499,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
            step_count: 0,
        }
    }

    pub fn for_target(target: &DenseMatrix) -> Self {
        Self::new(target.rows(), target.cols())
    }

    /// Applies one update to `target` in place.
    pub fn step(&mut self, target: &mut DenseMatrix, grad: &DenseMatrix, cfg: &AdamConfig) -> Result<()> {
        for other in [grad, &self.m] {
            if other.shape() != target.shape() {
                return Err(Error::DimensionMismatch {
                    op: "adam_step",
                    left: target.shape(),
                    right: other.shape(),
                });
            }
        }
        let m_scale = 1.0 / (1.0 - cfg.beta1);
        let v_scale = 1.0 / (1.0 - cfg.beta2);
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (((t, &g), mi), vi) in target.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi * m_scale;
            let v_hat = *vi * v_scale;
            *t -= cfg.gamma * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        self.step_count += 1;
        if !target.is_finite() {
            return Err(Error::NonFinite("adam_step"));
        }
        Ok(())
    }

    /// Functional form returning the updated target and state.
    pub fn adam_step(
        target: &DenseMatrix,
        grad: &DenseMatrix,
        state: &AdamState,
        cfg: &AdamConfig,
    ) -> Result<(DenseMatrix, AdamState)> {
        let mut t = target.clone();
        let mut s = state.clone();
        s.step(&mut t, grad, cfg)?;
        Ok((t, s))
    }
}
