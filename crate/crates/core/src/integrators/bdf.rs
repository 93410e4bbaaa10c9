use std::time::Instant;

use nalgebra::{DMatrix, DVector, LU};
use serde::{Deserialize, Serialize};

use super::{error_weights, weighted_rms, IntegratorError, StepOutcome, WorkStats};
use crate::kinetics::{fd_jacobian_flat, KineticsError, OdeProblem, StateVector, FD_EPS_REL};

/// Settings of [`bdf_integrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BdfOptions {
    pub rtol: f64,
    pub atol: f64,
    /// 1 or 2.
    pub max_order: usize,
    /// Debug mode: constant steps, no error control.
    pub fixed_step: Option<f64>,
    pub max_newton_iters: usize,
    /// Newton stops once the weighted residual norm drops below this.
    pub newton_tol: f64,
    /// Convergence-rate estimate above which the Jacobian is refreshed.
    pub slow_convergence_rate: f64,
    /// Accepted steps after which the Jacobian is refreshed regardless.
    pub jacobian_max_age: u32,
    pub max_step_halvings: u32,
    /// Relative change of `h * beta` that triggers a new LU factorization.
    pub refactor_threshold: f64,
    pub fd_eps: f64,
    pub max_steps: u64,
}

impl Default for BdfOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-10,
            max_order: 2,
            fixed_step: None,
            max_newton_iters: 10,
            newton_tol: 0.1,
            slow_convergence_rate: 0.5,
            jacobian_max_age: 20,
            max_step_halvings: 10,
            refactor_threshold: 0.3,
            fd_eps: FD_EPS_REL,
            max_steps: 1_000_000,
        }
    }
}

impl BdfOptions {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    pub fn fixed(step: f64, order: usize) -> Self {
        Self { fixed_step: Some(step), max_order: order, ..Self::default() }
    }

    fn validate(&self) -> Result<(), IntegratorError> {
        let bad = |msg: String| Err(IntegratorError::InvalidArgument(msg));
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return bad(format!("tolerances must be > 0 (rtol = {}, atol = {})", self.rtol, self.atol));
        }
        if !(1..=2).contains(&self.max_order) {
            return bad(format!("BDF order must be 1 or 2, got {}", self.max_order));
        }
        if let Some(h) = self.fixed_step {
            if !(h > 0.0) || !h.is_finite() {
                return bad(format!("fixed step must be > 0, got {h}"));
            }
        }
        Ok(())
    }
}

enum Newton {
    Converged { max_rate: f64 },
    Failed,
}

/// Solves `y - c - gamma f(t, y) = 0` by modified Newton with the factored
/// iteration matrix `I - gamma_lu J`, starting from the predictor in `y`.
/// When `f_known` is set, `f` already holds the rhs at the starting point. On
/// success `y` holds the solution and `f` the rhs there.
#[allow(clippy::too_many_arguments)]
fn newton_solve(
    problem: &dyn OdeProblem,
    t: f64,
    y: &mut [f64],
    f: &mut [f64],
    c: &[f64],
    gamma: f64,
    lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    ewt: &[f64],
    opts: &BdfOptions,
    mut f_known: bool,
    stats: &mut WorkStats,
) -> Newton {
    let n = y.len();
    let mut g = vec![0.0; n];
    let mut prev_norm: Option<f64> = None;
    let mut max_rate = 0.0f64;
    for k in 0..=opts.max_newton_iters {
        if !f_known {
            problem.rhs(t, y, f);
            stats.n_rhs += 1;
        }
        f_known = false;
        for i in 0..n {
            g[i] = y[i] - c[i] - gamma * f[i];
        }
        let norm = weighted_rms(&g, ewt);
        if !norm.is_finite() {
            return Newton::Failed;
        }
        if let Some(prev) = prev_norm {
            let rate = if prev > 0.0 { norm / prev } else { 0.0 };
            max_rate = max_rate.max(rate);
            if rate > 2.0 && k >= 3 {
                return Newton::Failed;
            }
        }
        if norm < opts.newton_tol {
            return Newton::Converged { max_rate };
        }
        if k == opts.max_newton_iters {
            break;
        }
        let rhs = DVector::from_iterator(n, g.iter().map(|v| -v));
        let delta = match lu.solve(&rhs) {
            Some(d) => d,
            None => return Newton::Failed,
        };
        stats.n_lu_solve += 1;
        stats.n_newton_iters += 1;
        for i in 0..n {
            y[i] += delta[i];
        }
        prev_norm = Some(norm);
    }
    Newton::Failed
}

/// Initial step from the weighted size of the solution and its first two
/// derivatives. Uses one extra rhs evaluation.
fn initial_step(
    problem: &dyn OdeProblem,
    t0: f64,
    x0: &[f64],
    f0: &[f64],
    span: f64,
    ewt: &[f64],
    stats: &mut WorkStats,
) -> f64 {
    let d0 = weighted_rms(x0, ewt);
    let d1 = weighted_rms(f0, ewt);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 * span } else { (0.01 * d0 / d1).min(span) };
    let y1: Vec<f64> = x0.iter().zip(f0).map(|(x, f)| x + h0 * f).collect();
    let mut f1 = vec![0.0; x0.len()];
    problem.rhs(t0 + h0, &y1, &mut f1);
    stats.n_rhs += 1;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = weighted_rms(&diff, ewt) / h0;
    let dmax = d1.max(d2);
    if !dmax.is_finite() {
        return h0;
    }
    if dmax <= 1e-15 {
        return span;
    }
    let h1 = (0.01 / dmax).sqrt();
    (100.0 * h0).min(h1).min(span)
}

fn step_factor(err: f64, order: usize, lo: f64, hi: f64) -> f64 {
    if err <= 0.0 {
        return hi;
    }
    (0.9 * err.powf(-1.0 / (order as f64 + 1.0))).clamp(lo, hi)
}

/// Advances `state0` to `t_end` with variable-step BDF of order 1-2.
///
/// Each call starts cold (order 1, new Jacobian), the way an implicit solver is
/// re-initialized for every operator-splitting window. Newton failures with a
/// current Jacobian halve the step; after `max_step_halvings` consecutive
/// halvings the call fails with `NewtonDiverged` and returns the last accepted
/// state.
pub fn bdf_integrate(
    problem: &dyn OdeProblem,
    state0: &StateVector,
    t_end: f64,
    opts: &BdfOptions,
) -> Result<StepOutcome, IntegratorError> {
    opts.validate()?;
    if !(t_end > state0.t) {
        return Err(IntegratorError::InvalidArgument(format!(
            "t_end = {t_end} must exceed the start time {}",
            state0.t
        )));
    }
    if state0.y.len() != problem.n_species() {
        return Err(KineticsError::Dimension { expected: problem.n_species(), got: state0.y.len() }.into());
    }
    let started = Instant::now();
    let n = problem.n_state();
    let t0 = state0.t;
    let span = t_end - t0;
    let mut stats = WorkStats::default();

    let mut x = state0.to_flat();
    let mut t = t0;
    let mut f_n = vec![0.0; n];
    problem.rhs(t, &x, &mut f_n);
    stats.n_rhs += 1;
    if f_n.iter().any(|v| !v.is_finite()) {
        stats.wall_seconds = started.elapsed().as_secs_f64();
        return Ok(StepOutcome::failed(state0.clone(), stats, IntegratorError::NonFiniteState { t }));
    }

    let mut ewt = vec![0.0; n];
    error_weights(&x, opts.rtol, opts.atol, &mut ewt);

    let mut h = match opts.fixed_step {
        Some(step) => step,
        None => initial_step(problem, t, &x, &f_n, span, &ewt, &mut stats),
    };

    let mut prev: Option<(Vec<f64>, f64)> = None;
    let mut jac: Option<DMatrix<f64>> = None;
    let mut jac_age = 0u32;
    let mut jac_stale = false;
    let mut lu: Option<(LU<f64, nalgebra::Dyn, nalgebra::Dyn>, f64)> = None;
    let mut halvings = 0u32;
    let mut error_fails = 0u32;
    let mut steps = 0u64;

    let mut c = vec![0.0; n];
    let mut y_pred = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut f_new = vec![0.0; n];

    let fail = |x: &[f64], t: f64, mut stats: WorkStats, err: IntegratorError| {
        stats.wall_seconds = started.elapsed().as_secs_f64();
        Ok(StepOutcome::failed(StateVector::from_flat(x, t), stats, err))
    };

    while t < t_end {
        steps += 1;
        if steps > opts.max_steps {
            return fail(&x, t, stats, IntegratorError::StepSizeUnderflow { t });
        }
        let remaining = t_end - t;
        let last = h >= remaining * (1.0 - 1e-12) || (opts.fixed_step.is_none() && remaining <= 1.05 * h);
        if last {
            h = remaining;
        }
        if h <= 1e-14 * t.abs().max(span) {
            return fail(&x, t, stats, IntegratorError::StepSizeUnderflow { t });
        }
        let t_new = if last { t_end } else { t + h };

        let order = if prev.is_some() && opts.max_order >= 2 { 2 } else { 1 };
        let (beta, lte_coef) = match (order, &prev) {
            (2, Some((y_prev, h_prev))) => {
                let w = h / h_prev;
                let a1 = (1.0 + w) * (1.0 + w) / (1.0 + 2.0 * w);
                let a2 = -w * w / (1.0 + 2.0 * w);
                let k_coef = 1.0 / (h_prev * h_prev);
                for i in 0..n {
                    c[i] = a1 * x[i] + a2 * y_prev[i];
                    let curv = (y_prev[i] - x[i] + f_n[i] * h_prev) * k_coef;
                    y_pred[i] = x[i] + f_n[i] * h + curv * h * h;
                }
                ((1.0 + w) / (1.0 + 2.0 * w), (h + h_prev) / (3.0 * h + 2.0 * h_prev))
            }
            _ => {
                for i in 0..n {
                    c[i] = x[i];
                    y_pred[i] = x[i] + h * f_n[i];
                }
                (1.0, 0.5)
            }
        };
        let gamma = h * beta;

        y_new.copy_from_slice(&y_pred);
        let mut f_known = false;
        if jac.is_none() || jac_stale || jac_age >= opts.jacobian_max_age {
            // Jacobian at the predicted state
            problem.rhs(t_new, &y_new, &mut f_new);
            stats.n_rhs += 1;
            f_known = true;
            match fd_jacobian_flat(problem, t_new, &y_new, &f_new, opts.fd_eps) {
                Ok(j) => jac = Some(j),
                Err(_) => {
                    halvings += 1;
                    if halvings > opts.max_step_halvings {
                        return fail(&x, t, stats, IntegratorError::NonFiniteState { t: t_new });
                    }
                    h *= 0.5;
                    continue;
                }
            }
            stats.n_jac += 1;
            jac_age = 0;
            jac_stale = false;
            lu = None;
        }
        let needs_factor = match &lu {
            None => true,
            Some((_, g)) => ((gamma / g) - 1.0).abs() > opts.refactor_threshold,
        };
        if needs_factor {
            let j = jac.as_ref().expect("jacobian computed above");
            let m = DMatrix::identity(n, n) - j * gamma;
            lu = Some((m.lu(), gamma));
            stats.n_lu_factor += 1;
        }
        let (lu_ref, gamma_lu) = lu.as_ref().expect("factored above");
        let fresh = jac_age == 0 && *gamma_lu == gamma;

        let result =
            newton_solve(problem, t_new, &mut y_new, &mut f_new, &c, gamma, lu_ref, &ewt, opts, f_known, &mut stats);
        let max_rate = match result {
            Newton::Converged { max_rate, .. } => max_rate,
            Newton::Failed => {
                stats.n_newton_fails += 1;
                if !fresh {
                    jac_stale = true;
                    continue;
                }
                halvings += 1;
                if halvings > opts.max_step_halvings {
                    return fail(&x, t, stats, IntegratorError::NewtonDiverged { t });
                }
                h *= 0.5;
                jac_stale = true;
                continue;
            }
        };
        halvings = 0;
        if max_rate > opts.slow_convergence_rate {
            jac_stale = true;
        }

        let mut err = 0.0;
        if opts.fixed_step.is_none() {
            let lte: Vec<f64> = y_new.iter().zip(&y_pred).map(|(a, b)| lte_coef * (a - b)).collect();
            err = weighted_rms(&lte, &ewt);
            if !err.is_finite() {
                return fail(&x, t, stats, IntegratorError::NonFiniteState { t: t_new });
            }
            if err > 1.0 {
                error_fails += 1;
                if error_fails > 50 {
                    return fail(&x, t, stats, IntegratorError::StepSizeUnderflow { t });
                }
                h *= step_factor(err, order, 0.2, 0.9);
                continue;
            }
        }
        error_fails = 0;

        if y_new.iter().any(|v| !v.is_finite()) {
            return fail(&x, t, stats, IntegratorError::NonFiniteState { t: t_new });
        }
        let y_old = std::mem::replace(&mut x, y_new.clone());
        prev = Some((y_old, h));
        f_n.copy_from_slice(&f_new);
        t = t_new;
        jac_age += 1;
        stats.n_substeps += 1;
        error_weights(&x, opts.rtol, opts.atol, &mut ewt);

        match opts.fixed_step {
            Some(step) => h = step,
            None => h *= step_factor(err, order, 0.2, 5.0),
        }
    }

    stats.wall_seconds = started.elapsed().as_secs_f64();
    Ok(StepOutcome::ok(StateVector::from_flat(&x, t_end), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{ConstantProblem, LinearProblem, Robertson};

    #[test]
    fn one_backward_euler_step_on_decay() {
        let p = LinearProblem::decay(1.0);
        let out = bdf_integrate(&p, &StateVector::new(vec![1.0], 0.0, 0.0), 0.1, &BdfOptions::fixed(0.1, 1)).unwrap();
        assert!(out.success);
        assert!((out.state.y[0] - 1.0 / 1.1).abs() < 1e-10, "{}", out.state.y[0]);
        // Newton is exact for linear G
        assert_eq!(out.stats.n_newton_iters, 1);
    }

    #[test]
    fn zero_rhs_leaves_state_unchanged() {
        let p = ConstantProblem::zero(2);
        let s0 = StateVector::new(vec![0.25, 0.5], 1000.0, 0.0);
        let out = bdf_integrate(&p, &s0, 1.0, &BdfOptions::default()).unwrap();
        assert!(out.success);
        assert_eq!(out.state.y, s0.y);
        assert_eq!(out.state.temp, s0.temp);
        assert!(out.stats.n_newton_iters <= out.stats.n_substeps);
    }

    #[test]
    fn a_stable_on_very_stiff_decay() {
        let p = LinearProblem::decay(1e6);
        let out = bdf_integrate(&p, &StateVector::new(vec![1.0], 0.0, 0.0), 1.0, &BdfOptions::fixed(1.0, 1)).unwrap();
        let y = out.state.y[0];
        assert!(y > 0.0 && y < 1.0, "{y}");
    }

    #[test]
    fn robertson_stiff_transient_newton_regression() {
        let p = Robertson::new();
        let out = bdf_integrate(&p, &StateVector::new(vec![1.0, 0.0, 0.0], 1.0, 0.0), 1e-2, &BdfOptions::default())
            .unwrap();
        assert!(out.success, "{:?}", out.failure);
        // every Newton solve converged within max_newton_iters = 10
        assert_eq!(out.stats.n_newton_fails, 0);
        // refreshes beyond the initial Jacobian and the age-based ones
        let by_age = out.stats.n_substeps / 20;
        assert!(out.stats.n_jac <= 1 + by_age + 2, "{:?}", out.stats);
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        let p = Robertson::new();
        let s = StateVector::new(vec![1.0, 0.0, 0.0], 1.0, 0.0);
        assert!(bdf_integrate(&p, &s, 0.0, &BdfOptions::default()).is_err());
        assert!(bdf_integrate(&p, &s, 1.0, &BdfOptions::with_tolerances(0.0, 1e-8)).is_err());
        assert!(bdf_integrate(&p, &s, 1.0, &BdfOptions { max_order: 3, ..Default::default() }).is_err());
    }

    #[test]
    fn newton_failure_is_reported_as_unsuccessful() {
        // dy/dt = y^3 blows up in finite time; a huge fixed step cannot converge.
        #[derive(Debug)]
        struct Cubic(crate::kinetics::Observables);
        impl OdeProblem for Cubic {
            fn id(&self) -> &str {
                "cubic"
            }
            fn n_species(&self) -> usize {
                1
            }
            fn rhs(&self, _: f64, x: &[f64], dx: &mut [f64]) {
                dx[0] = x[0] * x[0] * x[0];
                dx[1] = 0.0;
            }
            fn split(&self, _: f64, x: &[f64], q: &mut [f64], d: &mut [f64]) {
                q[0] = x[0] * x[0] * x[0];
                d[0] = 0.0;
                q[1] = 0.0;
                d[1] = 0.0;
            }
            fn observables(&self) -> &crate::kinetics::Observables {
                &self.0
            }
        }
        let p = Cubic(crate::kinetics::Observables { species_names: vec!["y".into()], key_species: vec![0] });
        let opts = BdfOptions { max_step_halvings: 2, ..BdfOptions::fixed(10.0, 1) };
        let out = bdf_integrate(&p, &StateVector::new(vec![1.0], 0.0, 0.0), 10.0, &opts).unwrap();
        assert!(!out.success);
        assert_eq!(out.state.t, 0.0);
        assert!(matches!(out.failure, Some(IntegratorError::NewtonDiverged { .. })));
    }
}
