//! Finite-difference gradient checking harness.
//!
//! Used by the test suites to validate every analytic gradient in this crate
//! against central differences, and exported so downstream experiments can
//! check their own composite losses.

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central difference step.
    pub step: f64,
    /// Floor for the relative-error denominator. Keeps finite-difference
    /// noise on near-zero coordinates from reading as huge relative errors
    /// while still catching real sign/scale bugs well below O(1).
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-3 }
    }
}

impl GradCheck {
    /// Central-difference gradient of `f` at `theta`, one coordinate at a
    /// time: (f(θ + h e_j) − f(θ − h e_j)) / 2h.
    pub fn numerical_gradient(
        &self,
        theta: &[f64],
        mut f: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<Vec<f64>> {
        let mut work = theta.to_vec();
        let mut grad = vec![0.0; theta.len()];
        for j in 0..theta.len() {
            let orig = work[j];
            work[j] = orig + self.step;
            let hi = f(&work)?;
            work[j] = orig - self.step;
            let lo = f(&work)?;
            work[j] = orig;
            grad[j] = (hi - lo) / (2.0 * self.step);
        }
        Ok(grad)
    }

    /// max_j |a_j − n_j| / max(|a_j|, |n_j|, floor)
    pub fn max_relative_error(&self, analytic: &[f64], numeric: &[f64]) -> f64 {
        assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
        let mut worst = 0.0f64;
        for (a, n) in analytic.iter().zip(numeric) {
            let denom = a.abs().max(n.abs()).max(self.floor);
            worst = worst.max((a - n).abs() / denom);
        }
        worst
    }

    /// Convenience: numerical gradient + comparison in one call.
    pub fn check(
        &self,
        theta: &[f64],
        analytic: &[f64],
        f: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<f64> {
        let numeric = self.numerical_gradient(theta, f)?;
        Ok(self.max_relative_error(analytic, &numeric))
    }
}
