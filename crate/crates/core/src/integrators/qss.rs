use std::time::Instant;

use super::{IntegratorError, StepOutcome, WorkStats};
use crate::kinetics::{OdeProblem, StateVector};

/// Pade blending coefficient as a function of `x = d * dt`.
///
/// `alpha(0) = 1/2` (trapezoidal limit) and `alpha -> 1` as `x -> inf`
/// (backward-Euler limit).
pub fn alpha_from_stiffness(x: f64) -> f64 {
    if x > 1e80 {
        return 1.0;
    }
    let x2 = x * x;
    let x3 = x2 * x;
    (180.0 + 60.0 * x + 11.0 * x2 + x3) / (360.0 + 60.0 * x + 12.0 * x2 + x3)
}

/// `alpha(r) = (180r^3 + 60r^2 + 11r + 1) / (360r^3 + 60r^2 + 12r + 1)` with
/// `r = 1/(d dt)`.
pub fn alpha_coefficient(r: f64) -> Result<f64, IntegratorError> {
    if r.is_nan() || r < 0.0 {
        return Err(IntegratorError::InvalidArgument(format!("alpha argument must be >= 0, got {r}")));
    }
    if r == 0.0 {
        return Ok(1.0);
    }
    Ok(alpha_from_stiffness(1.0 / r))
}

/// Advances `state0` to `t_end` with fixed alpha-QSS sub-steps of `dt_sub`
/// (the last sub-step is truncated to land on `t_end`).
///
/// Every entry, including the temperature-like one, is advanced with the same
/// predictor-corrector; the split reports the temperature as pure production.
/// A non-finite sub-step result is returned as `success = false` holding the
/// last finite state.
pub fn qss_integrate(
    problem: &dyn OdeProblem,
    state0: &StateVector,
    t_end: f64,
    dt_sub: f64,
) -> Result<StepOutcome, IntegratorError> {
    if !(dt_sub > 0.0) || !dt_sub.is_finite() {
        return Err(IntegratorError::InvalidArgument(format!("dt_sub must be > 0, got {dt_sub}")));
    }
    if !(t_end > state0.t) {
        return Err(IntegratorError::InvalidArgument(format!(
            "t_end = {t_end} must exceed the start time {}",
            state0.t
        )));
    }
    let n_species = problem.n_species();
    if state0.y.len() != n_species {
        return Err(crate::kinetics::KineticsError::Dimension { expected: n_species, got: state0.y.len() }.into());
    }
    let started = Instant::now();
    let n = n_species + 1;
    let t0 = state0.t;
    let span = t_end - t0;
    let n_sub = ((span / dt_sub) - 1e-9).ceil().max(1.0) as u64;

    let mut y = state0.to_flat();
    let mut q = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut q_star = vec![0.0; n];
    let mut d_star = vec![0.0; n];
    let mut y_pred = vec![0.0; n];
    let mut y_corr = vec![0.0; n];
    let mut stats = WorkStats::default();

    let mut t = t0;
    for i in 0..n_sub {
        let t_next = if i + 1 == n_sub { t_end } else { t0 + (i + 1) as f64 * dt_sub };
        let h = t_next - t;

        problem.split(t, &y, &mut q, &mut d);
        stats.n_rhs += 1;
        for k in 0..n {
            let a = alpha_from_stiffness(d[k] * h);
            y_pred[k] = y[k] + h * (q[k] - d[k] * y[k]) / (1.0 + a * d[k] * h);
        }

        problem.split(t_next, &y_pred, &mut q_star, &mut d_star);
        stats.n_rhs += 1;
        for k in 0..n {
            let d_bar = 0.5 * (d[k] + d_star[k]);
            let a_bar = alpha_from_stiffness(d_bar * h);
            let q_bar = a_bar * q_star[k] + (1.0 - a_bar) * q[k];
            y_corr[k] = y[k] + h * (q_bar - d_bar * y[k]) / (1.0 + a_bar * d_bar * h);
        }

        if y_corr.iter().any(|v| !v.is_finite()) {
            stats.wall_seconds = started.elapsed().as_secs_f64();
            return Ok(StepOutcome::failed(
                StateVector::from_flat(&y, t),
                stats,
                IntegratorError::NonFiniteState { t: t_next },
            ));
        }
        std::mem::swap(&mut y, &mut y_corr);
        t = t_next;
        stats.n_substeps += 1;
    }
    stats.wall_seconds = started.elapsed().as_secs_f64();
    Ok(StepOutcome::ok(StateVector::from_flat(&y, t_end), stats))
}
