//! Stiff ODE problem abstraction and the built-in benchmark problems.
//!
//! A problem state is stored flat as `[y_0, .., y_{n-1}, T]`: the species-like
//! variables followed by one temperature-like scalar. Every problem exposes the
//! full right-hand side and a production/destruction split
//! `dy_i/dt = q_i - d_i * y_i`. The temperature entry of the split is reported
//! as pure production (`d = 0`).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KineticsError {
    #[error("rhs evaluation produced a non-finite value at component {index}")]
    ProblemEval { index: usize },
    #[error("destruction coefficient d[{index}] = {value} is negative")]
    SplitContractViolation { index: usize, value: f64 },
    #[error("finite-difference Jacobian has a non-finite entry at ({row}, {col})")]
    Jacobian { row: usize, col: usize },
    #[error("state has {got} entries, problem expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid problem parameter: {0}")]
    InvalidParameter(String),
}

/// Problem-declared roles of the state entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub species_names: Vec<String>,
    /// Species indices used for features.
    pub key_species: Vec<usize>,
}

impl Observables {
    pub fn temperature_index(&self) -> usize {
        self.species_names.len()
    }

    pub fn key_species_names(&self) -> Vec<String> {
        self.key_species.iter().map(|&i| self.species_names[i].clone()).collect()
    }
}

/// A stiff system `dy/dt = f(y, T, p)`, `dT/dt = g(y, T, p)`.
///
/// Implementations are immutable after construction and may be shared across
/// threads.
pub trait OdeProblem: Send + Sync + fmt::Debug {
    fn id(&self) -> &str;

    fn n_species(&self) -> usize;

    fn n_state(&self) -> usize {
        self.n_species() + 1
    }

    /// Full right-hand side on the flat state `x = [y.., T]`.
    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]);

    /// Production `q` and destruction coefficients `d` over the flat state.
    fn split(&self, t: f64, x: &[f64], q: &mut [f64], d: &mut [f64]);

    fn observables(&self) -> &Observables;

    /// Pressure-like scalar in units of the reference pressure.
    fn pressure(&self) -> f64 {
        1.0
    }

    /// Rough floating-point cost of one rhs evaluation.
    fn rhs_flops(&self) -> f64 {
        (4 * self.n_state()) as f64
    }

    /// Largest relative change of the problem's conserved quantities between
    /// two states; zero for problems without any.
    fn invariant_drift(&self, _from: &StateVector, _to: &StateVector) -> f64 {
        0.0
    }
}

/// Species-like values, temperature-like scalar and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub y: Vec<f64>,
    pub temp: f64,
    pub t: f64,
}

impl StateVector {
    pub fn new(y: Vec<f64>, temp: f64, t: f64) -> Self {
        Self { y, temp, t }
    }

    pub fn from_flat(x: &[f64], t: f64) -> Self {
        let (temp, y) = x.split_last().expect("flat state is never empty");
        Self { y: y.to_vec(), temp: *temp, t }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.y.len() + 1);
        x.extend_from_slice(&self.y);
        x.push(self.temp);
        x
    }

    pub fn is_finite(&self) -> bool {
        self.temp.is_finite() && self.t.is_finite() && self.y.iter().all(|v| v.is_finite())
    }
}

fn check_dimension(problem: &dyn OdeProblem, state: &StateVector) -> Result<(), KineticsError> {
    if state.y.len() != problem.n_species() {
        return Err(KineticsError::Dimension { expected: problem.n_species(), got: state.y.len() });
    }
    Ok(())
}

/// Evaluates `(f, g)` concatenated.
pub fn eval_rhs(problem: &dyn OdeProblem, state: &StateVector) -> Result<Vec<f64>, KineticsError> {
    check_dimension(problem, state)?;
    let x = state.to_flat();
    let mut dx = vec![0.0; x.len()];
    problem.rhs(state.t, &x, &mut dx);
    if let Some(index) = dx.iter().position(|v| !v.is_finite()) {
        return Err(KineticsError::ProblemEval { index });
    }
    Ok(dx)
}

/// Evaluates the production/destruction split and checks `d >= 0`.
pub fn eval_split(
    problem: &dyn OdeProblem,
    state: &StateVector,
) -> Result<(Vec<f64>, Vec<f64>), KineticsError> {
    check_dimension(problem, state)?;
    let x = state.to_flat();
    let mut q = vec![0.0; x.len()];
    let mut d = vec![0.0; x.len()];
    problem.split(state.t, &x, &mut q, &mut d);
    if let Some(index) = q.iter().chain(d.iter()).position(|v| !v.is_finite()) {
        return Err(KineticsError::ProblemEval { index: index % x.len() });
    }
    if let Some((index, &value)) = d.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(KineticsError::SplitContractViolation { index, value });
    }
    Ok((q, d))
}

/// Default relative perturbation for [`finite_difference_jacobian`].
pub const FD_EPS_REL: f64 = 1e-7;

/// Forward-difference Jacobian of the full rhs on a flat state.
///
/// `f0` is the rhs at `x` when the caller already has it. Column `j` uses the
/// perturbation `max(eps_rel * |x_j|, eps_rel)`.
pub fn fd_jacobian_flat(
    problem: &dyn OdeProblem,
    t: f64,
    x: &[f64],
    f0: &[f64],
    eps_rel: f64,
) -> Result<DMatrix<f64>, KineticsError> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    for col in 0..n {
        let h = (eps_rel * x[col].abs()).max(eps_rel);
        xp[col] = x[col] + h;
        // exact representable step
        let h = xp[col] - x[col];
        problem.rhs(t, &xp, &mut fp);
        for row in 0..n {
            let v = (fp[row] - f0[row]) / h;
            if !v.is_finite() {
                return Err(KineticsError::Jacobian { row, col });
            }
            jac[(row, col)] = v;
        }
        xp[col] = x[col];
    }
    Ok(jac)
}

pub fn finite_difference_jacobian(
    problem: &dyn OdeProblem,
    state: &StateVector,
    eps_rel: f64,
) -> Result<DMatrix<f64>, KineticsError> {
    if !(eps_rel > 0.0) {
        return Err(KineticsError::InvalidParameter(format!("eps_rel must be > 0, got {eps_rel}")));
    }
    let f0 = eval_rhs(problem, state)?;
    fd_jacobian_flat(problem, state.t, &state.to_flat(), &f0, eps_rel)
}

// ---------------------------------------------------------------------------
// Robertson

/// Robertson's three-species autocatalytic system. The temperature-like entry
/// is passive (`dT/dt = 0`).
#[derive(Debug, Clone)]
pub struct Robertson {
    observables: Observables,
}

impl Robertson {
    pub const K1: f64 = 0.04;
    pub const K2: f64 = 3.0e7;
    pub const K3: f64 = 1.0e4;

    pub fn new() -> Self {
        Self {
            observables: Observables {
                species_names: vec!["y1".into(), "y2".into(), "y3".into()],
                key_species: vec![0, 1, 2],
            },
        }
    }
}

impl Default for Robertson {
    fn default() -> Self {
        Self::new()
    }
}

impl OdeProblem for Robertson {
    fn id(&self) -> &str {
        "robertson"
    }

    fn n_species(&self) -> usize {
        3
    }

    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        let (y1, y2, y3) = (x[0], x[1], x[2]);
        dx[0] = -Self::K1 * y1 + Self::K3 * y2 * y3;
        dx[1] = Self::K1 * y1 - Self::K3 * y2 * y3 - Self::K2 * y2 * y2;
        dx[2] = Self::K2 * y2 * y2;
        dx[3] = 0.0;
    }

    fn split(&self, _t: f64, x: &[f64], q: &mut [f64], d: &mut [f64]) {
        let (y1, y2, y3) = (x[0], x[1], x[2]);
        q[0] = Self::K3 * y2 * y3;
        d[0] = Self::K1;
        q[1] = Self::K1 * y1;
        d[1] = Self::K3 * y3 + Self::K2 * y2;
        q[2] = Self::K2 * y2 * y2;
        d[2] = 0.0;
        q[3] = 0.0;
        d[3] = 0.0;
    }

    fn observables(&self) -> &Observables {
        &self.observables
    }

    fn rhs_flops(&self) -> f64 {
        12.0
    }
}

// ---------------------------------------------------------------------------
// Two-step ignition

/// Constants of the two-step ignition model.
///
/// Chain branching `F + R -> 2R` at `k1 = (p/p_ref) * a1 * exp(-ta1/T)` and
/// termination `R -> P` at `k2 = (p/p_ref) * a2 * exp(-ta2/T)`, which releases
/// heat `dT/dt = heat_release * k2 * R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IgnitionParams {
    pub a1: f64,
    pub ta1: f64,
    pub a2: f64,
    pub ta2: f64,
    pub heat_release: f64,
    /// Initial radical seed.
    pub radical_seed: f64,
}

impl Default for IgnitionParams {
    fn default() -> Self {
        Self {
            a1: 1.6e10,
            ta1: 1.0e4,
            a2: 6.9e14,
            ta2: 3.0e4,
            heat_release: 3.0e4,
            radical_seed: 1e-9,
        }
    }
}

impl IgnitionParams {
    pub fn validate(&self) -> Result<(), KineticsError> {
        let all = [self.a1, self.ta1, self.a2, self.ta2, self.heat_release, self.radical_seed];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(KineticsError::InvalidParameter(
                "ignition constants must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// State `(Y_fuel, Y_radical, Y_product, T)` at a fixed pressure.
#[derive(Debug, Clone)]
pub struct TwoStepIgnition {
    params: IgnitionParams,
    pressure: f64,
    observables: Observables,
}

impl TwoStepIgnition {
    pub const FUEL: usize = 0;
    pub const RADICAL: usize = 1;
    pub const PRODUCT: usize = 2;

    pub fn new(params: IgnitionParams, pressure: f64) -> Result<Self, KineticsError> {
        params.validate()?;
        if !(pressure > 0.0) || !pressure.is_finite() {
            return Err(KineticsError::InvalidParameter(format!("pressure must be > 0, got {pressure}")));
        }
        Ok(Self {
            params,
            pressure,
            observables: Observables {
                species_names: vec!["fuel".into(), "radical".into(), "product".into()],
                key_species: vec![Self::RADICAL, Self::FUEL, Self::PRODUCT],
            },
        })
    }

    pub fn params(&self) -> &IgnitionParams {
        &self.params
    }

    fn rates(&self, temp: f64) -> (f64, f64) {
        let p = &self.params;
        let k1 = self.pressure * p.a1 * (-p.ta1 / temp).exp();
        let k2 = self.pressure * p.a2 * (-p.ta2 / temp).exp();
        (k1, k2)
    }
}

impl OdeProblem for TwoStepIgnition {
    fn id(&self) -> &str {
        "two_step_ignition"
    }

    fn n_species(&self) -> usize {
        3
    }

    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        let (fuel, radical, temp) = (x[0], x[1], x[3]);
        let (k1, k2) = self.rates(temp);
        let branching = k1 * fuel * radical;
        let termination = k2 * radical;
        dx[0] = -branching;
        dx[1] = branching - termination;
        dx[2] = termination;
        dx[3] = self.params.heat_release * termination;
    }

    fn split(&self, _t: f64, x: &[f64], q: &mut [f64], d: &mut [f64]) {
        let (fuel, radical, temp) = (x[0], x[1], x[3]);
        let (k1, k2) = self.rates(temp);
        q[0] = 0.0;
        d[0] = k1 * radical.max(0.0);
        q[1] = 2.0 * k1 * fuel * radical;
        d[1] = k1 * fuel.max(0.0) + k2;
        q[2] = k2 * radical;
        d[2] = 0.0;
        q[3] = self.params.heat_release * k2 * radical;
        d[3] = 0.0;
        // Negative trace values are moved from d into q so d stays >= 0 and
        // q - d*y is unchanged.
        if radical < 0.0 {
            q[0] -= k1 * radical * fuel;
        }
        if fuel < 0.0 {
            q[1] -= k1 * fuel * radical;
        }
    }

    fn observables(&self) -> &Observables {
        &self.observables
    }

    fn pressure(&self) -> f64 {
        self.pressure
    }

    fn rhs_flops(&self) -> f64 {
        // two exponentials dominate
        50.0
    }

    /// Total species mass and `T - Q * Y_product` are conserved.
    fn invariant_drift(&self, from: &StateVector, to: &StateVector) -> f64 {
        let mass = |s: &StateVector| s.y.iter().sum::<f64>();
        let energy = |s: &StateVector| s.temp - self.params.heat_release * s.y[Self::PRODUCT];
        let rel = |a: f64, b: f64| (b - a).abs() / a.abs().max(f64::MIN_POSITIVE);
        rel(mass(from), mass(to)).max(rel(energy(from), energy(to)))
    }
}

// ---------------------------------------------------------------------------
// Linear and constant test problems

/// `dx/dt = A x` over the full flat state (the last entry plays the
/// temperature role).
#[derive(Debug, Clone)]
pub struct LinearProblem {
    matrix: DMatrix<f64>,
    observables: Observables,
}

impl LinearProblem {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, KineticsError> {
        if !matrix.is_square() || matrix.nrows() < 2 {
            return Err(KineticsError::InvalidParameter("linear problem needs a square matrix of size >= 2".into()));
        }
        let n_species = matrix.nrows() - 1;
        Ok(Self {
            matrix,
            observables: Observables {
                species_names: (0..n_species).map(|i| format!("y{i}")).collect(),
                key_species: (0..n_species).collect(),
            },
        })
    }

    /// Scalar decay `dy/dt = -rate * y` with a passive temperature.
    pub fn decay(rate: f64) -> Self {
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 0)] = -rate;
        Self::new(a).expect("2x2 matrix")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl OdeProblem for LinearProblem {
    fn id(&self) -> &str {
        "linear"
    }

    fn n_species(&self) -> usize {
        self.matrix.nrows() - 1
    }

    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        let n = self.matrix.nrows();
        for (i, out) in dx.iter_mut().enumerate().take(n) {
            *out = (0..n).map(|j| self.matrix[(i, j)] * x[j]).sum();
        }
    }

    fn split(&self, _t: f64, x: &[f64], q: &mut [f64], d: &mut [f64]) {
        let n = self.matrix.nrows();
        for i in 0..n {
            let diag = self.matrix[(i, i)];
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| self.matrix[(i, j)] * x[j]).sum();
            if i < n - 1 && diag < 0.0 {
                q[i] = off;
                d[i] = -diag;
            } else {
                q[i] = off + diag * x[i];
                d[i] = 0.0;
            }
        }
    }

    fn observables(&self) -> &Observables {
        &self.observables
    }
}

/// Constant rates `dx/dt = c`; `c = 0` gives the trivial equilibrium problem.
#[derive(Debug, Clone)]
pub struct ConstantProblem {
    rates: Vec<f64>,
    observables: Observables,
}

impl ConstantProblem {
    pub fn new(rates: Vec<f64>) -> Result<Self, KineticsError> {
        if rates.len() < 2 {
            return Err(KineticsError::InvalidParameter("constant problem needs >= 2 state entries".into()));
        }
        let n_species = rates.len() - 1;
        Ok(Self {
            rates,
            observables: Observables {
                species_names: (0..n_species).map(|i| format!("y{i}")).collect(),
                key_species: (0..n_species).collect(),
            },
        })
    }

    pub fn zero(n_species: usize) -> Self {
        Self::new(vec![0.0; n_species + 1]).expect("n_species + 1 >= 2")
    }
}

impl OdeProblem for ConstantProblem {
    fn id(&self) -> &str {
        "constant"
    }

    fn n_species(&self) -> usize {
        self.rates.len() - 1
    }

    fn rhs(&self, _t: f64, _x: &[f64], dx: &mut [f64]) {
        dx.copy_from_slice(&self.rates);
    }

    fn split(&self, _t: f64, _x: &[f64], q: &mut [f64], d: &mut [f64]) {
        q.copy_from_slice(&self.rates);
        d.iter_mut().for_each(|v| *v = 0.0);
    }

    fn observables(&self) -> &Observables {
        &self.observables
    }
}

// ---------------------------------------------------------------------------
// Problem selection

/// Initial-condition parameters: temperature, pressure and fuel fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub temperature: f64,
    pub pressure: f64,
    pub fuel: f64,
}

impl Condition {
    pub fn nominal() -> Self {
        Self { temperature: 1000.0, pressure: 1.0, fuel: 0.05 }
    }
}

/// Config-level problem selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    TwoStepIgnition {
        #[serde(default)]
        params: IgnitionParams,
    },
    Robertson,
    /// Row-major square matrix.
    Linear { matrix: Vec<Vec<f64>> },
    Constant { rates: Vec<f64> },
}

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec::TwoStepIgnition { params: IgnitionParams::default() }
    }
}

impl ProblemSpec {
    pub fn id(&self) -> &'static str {
        match self {
            ProblemSpec::TwoStepIgnition { .. } => "two_step_ignition",
            ProblemSpec::Robertson => "robertson",
            ProblemSpec::Linear { .. } => "linear",
            ProblemSpec::Constant { .. } => "constant",
        }
    }

    /// Builds the problem instance for one sampled condition.
    pub fn instantiate(&self, cond: &Condition) -> Result<Arc<dyn OdeProblem>, KineticsError> {
        Ok(match self {
            ProblemSpec::TwoStepIgnition { params } => Arc::new(TwoStepIgnition::new(*params, cond.pressure)?),
            ProblemSpec::Robertson => Arc::new(Robertson::new()),
            ProblemSpec::Linear { matrix } => {
                let n = matrix.len();
                if matrix.iter().any(|row| row.len() != n) {
                    return Err(KineticsError::InvalidParameter("linear matrix must be square".into()));
                }
                let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
                Arc::new(LinearProblem::new(DMatrix::from_row_slice(n, n, &flat))?)
            }
            ProblemSpec::Constant { rates } => Arc::new(ConstantProblem::new(rates.clone())?),
        })
    }

    /// Initial state for a condition at `t = 0`.
    pub fn initial_state(&self, cond: &Condition) -> StateVector {
        match self {
            ProblemSpec::TwoStepIgnition { params } => StateVector::new(
                vec![cond.fuel, params.radical_seed, 0.0],
                cond.temperature,
                0.0,
            ),
            ProblemSpec::Robertson => StateVector::new(vec![1.0, 0.0, 0.0], 1.0, 0.0),
            ProblemSpec::Linear { matrix } => {
                let n = matrix.len().max(2);
                StateVector::new(vec![1.0; n - 1], cond.temperature, 0.0)
            }
            ProblemSpec::Constant { rates } => {
                let n = rates.len().max(2);
                StateVector::new(vec![cond.fuel; n - 1], cond.temperature, 0.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn robertson_rhs_at_initial_state() {
        let p = Robertson::new();
        let s = StateVector::new(vec![1.0, 0.0, 0.0], 1.0, 0.0);
        let f = eval_rhs(&p, &s).unwrap();
        assert_eq!(f, vec![-0.04, 0.04, 0.0, 0.0]);
    }

    #[test]
    fn robertson_split_species_one() {
        let p = Robertson::new();
        let s = StateVector::new(vec![1.0, 0.0, 0.0], 1.0, 0.0);
        let (q, d) = eval_split(&p, &s).unwrap();
        assert_eq!(q[0], 0.0);
        assert_eq!(d[0], 0.04);
    }

    #[test]
    fn equilibrium_has_zero_rhs() {
        // Robertson with y2 = y3 = 0 and y1 = 0 is a fixed point.
        let p = Robertson::new();
        let f = eval_rhs(&p, &StateVector::new(vec![0.0, 0.0, 0.7], 1.0, 0.0)).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
        let c = ConstantProblem::zero(3);
        let f = eval_rhs(&c, &StateVector::new(vec![0.2, 0.3, 0.5], 800.0, 1.0)).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ignition_rhs_conserves_its_invariants() {
        let p = TwoStepIgnition::new(IgnitionParams::default(), 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let s = StateVector::new(
                vec![rng.gen_range(0.0..0.1), rng.gen_range(0.0..1e-2), rng.gen_range(0.0..0.1)],
                rng.gen_range(800.0..2500.0),
                0.0,
            );
            let f = eval_rhs(&p, &s).unwrap();
            // an explicit Euler step moves both invariants only by rounding
            let h = 1e-3 / f.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let y: Vec<f64> = s.y.iter().zip(&f).map(|(y, d)| y + h * d).collect();
            let next = StateVector::new(y, s.temp + h * f[3], h);
            assert!(p.invariant_drift(&s, &next) < 1e-12);
        }
        let s = StateVector::new(vec![0.05, 1e-9, 0.0], 1000.0, 0.0);
        let hot = StateVector::new(vec![0.05, 1e-9, 0.0], 1100.0, 0.0);
        assert!((p.invariant_drift(&s, &hot) - 0.1).abs() < 1e-12);
        assert_eq!(Robertson::new().invariant_drift(&s, &hot), 0.0);
    }

    #[test]
    fn cold_ignition_has_negligible_heating() {
        let params = IgnitionParams { ta2: 20000.0, ..IgnitionParams::default() };
        let p = TwoStepIgnition::new(params, 1.0).unwrap();
        let f = eval_rhs(&p, &StateVector::new(vec![0.05, 1e-9, 0.0], 20.0, 0.0)).unwrap();
        assert!(f[3].abs() < 1e-12);
    }

    #[test]
    fn zero_species_with_production_gives_rhs_equal_q() {
        let p = Robertson::new();
        let s = StateVector::new(vec![1.0, 0.0, 0.0], 1.0, 0.0);
        let (q, _) = eval_split(&p, &s).unwrap();
        let f = eval_rhs(&p, &s).unwrap();
        assert_eq!(f[1], q[1]);
    }

    #[test]
    fn pure_decay_split() {
        let p = LinearProblem::decay(3.0);
        let s = StateVector::new(vec![2.0], 1.0, 0.0);
        let (q, d) = eval_split(&p, &s).unwrap();
        assert_eq!((q[0], d[0]), (0.0, 3.0));
        assert_eq!(eval_rhs(&p, &s).unwrap()[0], -6.0);
    }

    #[test]
    fn non_finite_rhs_is_reported() {
        let p = ConstantProblem::new(vec![1.0, f64::NAN]).unwrap();
        let err = eval_rhs(&p, &StateVector::new(vec![0.0], 1.0, 0.0)).unwrap_err();
        assert_eq!(err, KineticsError::ProblemEval { index: 1 });
    }

    #[test]
    fn negative_destruction_is_rejected() {
        #[derive(Debug)]
        struct Bad(Observables);
        impl OdeProblem for Bad {
            fn id(&self) -> &str {
                "bad"
            }
            fn n_species(&self) -> usize {
                1
            }
            fn rhs(&self, _: f64, x: &[f64], dx: &mut [f64]) {
                dx[0] = x[0];
                dx[1] = 0.0;
            }
            fn split(&self, _: f64, _: &[f64], q: &mut [f64], d: &mut [f64]) {
                q.fill(0.0);
                d[0] = -1.0;
                d[1] = 0.0;
            }
            fn observables(&self) -> &Observables {
                &self.0
            }
        }
        let p = Bad(Observables { species_names: vec!["a".into()], key_species: vec![0] });
        let err = eval_split(&p, &StateVector::new(vec![1.0], 1.0, 0.0)).unwrap_err();
        assert!(matches!(err, KineticsError::SplitContractViolation { index: 0, .. }));
    }

    #[test]
    fn jacobian_of_linear_problem_is_the_matrix() {
        let a = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 0.5, 0.3, -40.0, 0.0, 0.0, 7.0, -0.1]);
        let p = LinearProblem::new(a.clone()).unwrap();
        let j = finite_difference_jacobian(&p, &StateVector::new(vec![0.4, 2.0], 3.0, 0.0), FD_EPS_REL).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let (x, y) = (j[(r, c)], a[(r, c)]);
                assert!((x - y).abs() <= 1e-5 * y.abs().max(1e-3), "({r},{c}) {x} vs {y}");
            }
        }
    }

    #[test]
    fn jacobian_of_robertson_matches_analytic() {
        let p = Robertson::new();
        let j = finite_difference_jacobian(&p, &StateVector::new(vec![1.0, 0.0, 0.0], 1.0, 0.0), FD_EPS_REL)
            .unwrap();
        assert!((j[(0, 0)] + 0.04).abs() < 1e-5);
        // d f1 / d y2 = -k1... analytic: 1e4*y3 = 0 here
        assert!(j[(0, 1)].abs() < 1e-5 * 1e4);
        assert!((j[(1, 0)] - 0.04).abs() < 1e-5);
    }

    #[test]
    fn jacobian_of_constant_rhs_is_zero() {
        let p = ConstantProblem::new(vec![1.5, -2.0, 3.0]).unwrap();
        let j = finite_difference_jacobian(&p, &StateVector::new(vec![1.0, 2.0], 3.0, 0.0), FD_EPS_REL).unwrap();
        assert!(j.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn jacobian_rejects_bad_eps() {
        let p = Robertson::new();
        let s = StateVector::new(vec![1.0, 0.0, 0.0], 1.0, 0.0);
        assert!(finite_difference_jacobian(&p, &s, 0.0).is_err());
    }

    fn check_split_consistency(p: &dyn OdeProblem, sample: impl Fn(&mut ChaCha8Rng) -> StateVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let s = sample(&mut rng);
            let f = eval_rhs(p, &s).unwrap();
            let (q, d) = eval_split(p, &s).unwrap();
            let x = s.to_flat();
            for i in 0..x.len() {
                assert!(d[i] >= 0.0);
                if i < p.n_species() {
                    assert!(q[i] >= 0.0, "q[{i}] = {} at {:?}", q[i], s);
                }
                let recon = q[i] - d[i] * x[i];
                let scale = f[i].abs().max(q[i].abs()).max((d[i] * x[i]).abs());
                assert!((recon - f[i]).abs() <= 1e-12 * scale, "{i}: {recon} vs {}", f[i]);
            }
        }
    }

    #[test]
    fn split_consistency_on_random_states() {
        let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| 10f64.powf(rng.gen_range(lo..hi));
        check_split_consistency(&Robertson::new(), |rng| {
            StateVector::new(
                vec![rng.gen_range(0.0..1.0), log_uniform(rng, -12.0, -3.0), rng.gen_range(0.0..1.0)],
                1.0,
                0.0,
            )
        });
        let ign = TwoStepIgnition::new(IgnitionParams::default(), 3.0).unwrap();
        check_split_consistency(&ign, |rng| {
            StateVector::new(
                vec![rng.gen_range(0.0..0.1), log_uniform(rng, -12.0, -1.0), rng.gen_range(0.0..0.1)],
                rng.gen_range(800.0..3500.0),
                0.0,
            )
        });
    }

    #[test]
    fn problem_spec_builds_initial_states() {
        let spec = ProblemSpec::default();
        let cond = Condition { temperature: 950.0, pressure: 2.0, fuel: 0.04 };
        let p = spec.instantiate(&cond).unwrap();
        assert_eq!(p.pressure(), 2.0);
        let s = spec.initial_state(&cond);
        assert_eq!(s.y[0], 0.04);
        assert_eq!(s.temp, 950.0);
        assert!(rel_close(s.y[1], IgnitionParams::default().radical_seed, 0.0));
        let linear = ProblemSpec::Linear { matrix: vec![vec![-1.0, 0.0], vec![0.0, 0.0]] };
        assert_eq!(linear.instantiate(&cond).unwrap().n_state(), 2);
        let bad = ProblemSpec::Linear { matrix: vec![vec![-1.0, 0.0], vec![0.0]] };
        assert!(bad.instantiate(&cond).is_err());
    }

    #[test]
    fn problem_spec_toml_roundtrip() {
        let spec = ProblemSpec::default();
        let text = toml::to_string(&spec).unwrap();
        let back: ProblemSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
