//! Reference solvers: strict-phase SLP by null-space barrier Newton, an exhaustive KKT
//! oracle for small instances, and conventional block-level precoding.

mod blp;
mod ipm;
mod kkt;

pub use blp::{solve_blp, BlpOptions, BlpReport};
pub use ipm::solve_slp_strict;
pub use kkt::kkt_oracle;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};
use crate::model::{im_residual, re_margin, skew, LiftedProblem, RealPrecoder};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Tolerance on feasibility, complementarity and (scaled) stationarity.
    pub tol: f64,
    /// Barrier continuation steps.
    pub max_outer: usize,
    /// Newton iterations per centering step.
    pub max_newton: usize,
    /// Initial barrier weight.
    pub mu0: f64,
    /// Barrier decrease factor per outer step.
    pub mu_shrink: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_outer: 50,
            max_newton: 50,
            mu0: 1.0,
            mu_shrink: 0.2,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.mu_shrink > 0.0 && self.mu_shrink < 1.0) {
            return Err(invalid(format!(
                "mu_shrink must lie in (0, 1), got {}",
                self.mu_shrink
            )));
        }
        if !(self.mu0 > 0.0) {
            return Err(invalid(format!("mu0 must be positive, got {}", self.mu0)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub v1: RealPrecoder,
    pub power: f64,
    pub duals_mu: Vec<f64>,
    pub duals_lambda: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Seconds.
    pub wall_time: f64,
}

impl SolveReport {
    pub(crate) fn infeasible(dim: usize, k: usize, iterations: usize, wall_time: f64) -> Self {
        Self {
            v1: RealPrecoder::zeros(dim / 2),
            power: 0.0,
            duals_mu: vec![0.0; k],
            duals_lambda: vec![0.0; k],
            status: SolveStatus::Infeasible,
            iterations,
            wall_time,
        }
    }
}

/// `v1 = ½ Σ_i (μ_i Υ_i + λ_i ΩΥ_i)`, the minimizer of the Lagrangian
/// `‖v1‖² + Σ λ_i Υ_iᵀΩv1 + Σ μ_i (g_i − Υ_iᵀv1)`.
pub fn dual_to_primal(mu: &[f64], lambda: &[f64], lp: &LiftedProblem) -> Result<RealPrecoder> {
    check_len("inequality multipliers", lp.users(), mu.len())?;
    check_len("equality multipliers", lp.users(), lambda.len())?;
    RealPrecoder::new(dual_to_primal_vec(mu, lambda, lp.rows()))
}

pub(crate) fn dual_to_primal_vec(
    mu: &[f64],
    lambda: &[f64],
    rows: &[DVector<f64>],
) -> DVector<f64> {
    let mut a = DVector::zeros(rows[0].len());
    let mut b = DVector::zeros(rows[0].len());
    for ((u, &m), &l) in rows.iter().zip(mu).zip(lambda) {
        a.axpy(0.5 * m, u, 1.0);
        b.axpy(0.5 * l, u, 1.0);
    }
    a + skew(&b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// `max_i |Υ_iᵀΩv1|`.
    pub max_eq_residual: f64,
    /// `min_i (Υ_iᵀv1 − g_i)`.
    pub min_margin: f64,
    pub feasible: bool,
}

/// `feasible ⇔ max_eq_residual ≤ tol ∧ min_margin ≥ −tol`.
pub fn check_feasibility(lp: &LiftedProblem, v1: &DVector<f64>, tol: f64) -> FeasibilityReport {
    let k = lp.users();
    let max_eq_residual = (0..k)
        .map(|i| im_residual(lp, v1, i).abs())
        .fold(0.0, f64::max);
    let min_margin = (0..k)
        .map(|i| re_margin(lp, v1, i))
        .fold(f64::INFINITY, f64::min);
    FeasibilityReport {
        max_eq_residual,
        min_margin,
        feasible: max_eq_residual <= tol && min_margin >= -tol,
    }
}

/// Per-user check with tolerances relative to each threshold:
/// `|Υ_iᵀΩv1| ≤ rel·g_i` and `Υ_iᵀv1 − g_i ≥ −rel·g_i`.
pub fn feasible_relative(lp: &LiftedProblem, v1: &DVector<f64>, rel: f64) -> bool {
    (0..lp.users()).all(|i| {
        let g = lp.threshold(i);
        im_residual(lp, v1, i).abs() <= rel * g && re_margin(lp, v1, i) >= -rel * g
    })
}

/// `‖2v1 + Σ λ_i ΩᵀΥ_i − Σ μ_i Υ_i‖∞`.
pub fn stationarity_residual(
    lp: &LiftedProblem,
    v1: &DVector<f64>,
    mu: &[f64],
    lambda: &[f64],
) -> f64 {
    let target = dual_to_primal_vec(mu, lambda, lp.rows());
    (v1 - target).amax() * 2.0
}
