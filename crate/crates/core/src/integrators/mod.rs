//! The two solver classes: an adaptive implicit BDF integrator (orders 1-2,
//! Newton with a finite-difference Jacobian and dense LU) and the explicit
//! alpha-QSS predictor-corrector. Both report deterministic work counts.

mod bdf;
mod qss;

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::{KineticsError, StateVector};

pub use bdf::{bdf_integrate, BdfOptions};
pub use qss::{alpha_coefficient, alpha_from_stiffness, qss_integrate};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegratorError {
    #[error("Newton iteration diverged at t = {t} after repeated step reductions")]
    NewtonDiverged { t: f64 },
    #[error("non-finite state reached at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("invalid integrator argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Problem(#[from] KineticsError),
}

/// Operation counts of one or more integrator calls.
///
/// Counts are additive; `wall_seconds` is informational only and never enters
/// the cost signal.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct WorkStats {
    pub n_rhs: u64,
    pub n_jac: u64,
    pub n_lu_factor: u64,
    pub n_lu_solve: u64,
    pub n_newton_iters: u64,
    pub n_substeps: u64,
    /// Newton solves that did not converge (each one is retried).
    #[serde(default)]
    pub n_newton_fails: u64,
    #[serde(default)]
    pub wall_seconds: f64,
}

impl WorkStats {
    /// Component-wise equality of the counters (ignores wall time).
    pub fn same_counts(&self, other: &WorkStats) -> bool {
        self.n_rhs == other.n_rhs
            && self.n_jac == other.n_jac
            && self.n_lu_factor == other.n_lu_factor
            && self.n_lu_solve == other.n_lu_solve
            && self.n_newton_iters == other.n_newton_iters
            && self.n_substeps == other.n_substeps
            && self.n_newton_fails == other.n_newton_fails
    }

    pub fn work_units(&self, weights: &CostWeights) -> f64 {
        self.n_rhs as f64
            + weights.jacobian * self.n_jac as f64
            + weights.lu_factor * self.n_lu_factor as f64
            + weights.lu_solve * self.n_lu_solve as f64
    }
}

impl AddAssign for WorkStats {
    fn add_assign(&mut self, rhs: Self) {
        self.n_rhs += rhs.n_rhs;
        self.n_jac += rhs.n_jac;
        self.n_lu_factor += rhs.n_lu_factor;
        self.n_lu_solve += rhs.n_lu_solve;
        self.n_newton_iters += rhs.n_newton_iters;
        self.n_substeps += rhs.n_substeps;
        self.n_newton_fails += rhs.n_newton_fails;
        self.wall_seconds += rhs.wall_seconds;
    }
}

impl Add for WorkStats {
    type Output = WorkStats;

    fn add(mut self, rhs: Self) -> Self::Output {
        self += rhs;
        self
    }
}

/// Weights converting operation counts into rhs-equivalent work units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub jacobian: f64,
    pub lu_factor: f64,
    pub lu_solve: f64,
}

impl CostWeights {
    /// `c_J = n`, `c_F = n^2/3`, `c_S = n` for an `n`-dimensional state.
    pub fn for_dimension(n_state: usize) -> Self {
        let n = n_state as f64;
        Self { jacobian: n, lu_factor: n * n / 3.0, lu_solve: n }
    }
}

/// Result of integrating over one window.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// End-of-window state, or the last accepted state on failure.
    pub state: StateVector,
    pub stats: WorkStats,
    pub success: bool,
    pub failure: Option<IntegratorError>,
}

impl StepOutcome {
    fn ok(state: StateVector, stats: WorkStats) -> Self {
        Self { state, stats, success: true, failure: None }
    }

    fn failed(state: StateVector, stats: WorkStats, err: IntegratorError) -> Self {
        Self { state, stats, success: false, failure: Some(err) }
    }
}

/// Weighted RMS norm with weights `1 / (atol + rtol |y_i|)`.
pub(crate) fn weighted_rms(v: &[f64], weights: &[f64]) -> f64 {
    let sum: f64 = v.iter().zip(weights).map(|(a, w)| (a * w) * (a * w)).sum();
    (sum / v.len() as f64).sqrt()
}

pub(crate) fn error_weights(y: &[f64], rtol: f64, atol: f64, out: &mut [f64]) {
    for (w, v) in out.iter_mut().zip(y) {
        *w = 1.0 / (atol + rtol * v.abs());
    }
}
