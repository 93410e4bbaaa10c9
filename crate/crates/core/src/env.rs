//! The solver-selection MDP: features, dispatch, normalized cost, Lagrangian
//! reward and episode bookkeeping.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrators::{bdf_integrate, qss_integrate, CostWeights, IntegratorError, WorkStats};
use crate::kinetics::{Condition, OdeProblem, StateVector};
use crate::reference::{error_metric, ErrorWeights, ReferenceError, ReferenceSettings, ReferenceTrajectory};

/// Floor inside `log10(max(Y, floor))`.
pub const LOG_FLOOR: f64 = 1e-20;
/// Reference pressure of the pressure feature.
pub const P_REF: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode is finished; call reset")]
    EpisodeDone,
    #[error("invalid action {0} (0 = BDF, 1 = QSS)")]
    InvalidAction(usize),
    #[error("configuration: {0}")]
    Config(String),
    #[error("BDF failed on window [{t0}, {t1}]: {source}")]
    SolverFailure { t0: f64, t1: f64, source: IntegratorError },
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Uniform,
    LogUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
    pub scale: Scale,
}

impl ParamRange {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self { lo, hi, scale: Scale::Uniform }
    }

    pub fn log_uniform(lo: f64, hi: f64) -> Self {
        Self { lo, hi, scale: Scale::LogUniform }
    }

    fn validate(&self, name: &str) -> Result<(), EnvError> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            return Err(EnvError::Config(format!("{name}: empty range [{}, {}]", self.lo, self.hi)));
        }
        if self.scale == Scale::LogUniform && self.lo <= 0.0 {
            return Err(EnvError::Config(format!("{name}: log-uniform range needs lo > 0, got {}", self.lo)));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        if self.lo == self.hi {
            return self.lo;
        }
        match self.scale {
            Scale::Uniform => self.lo + (self.hi - self.lo) * u,
            Scale::LogUniform => (self.lo.ln() + (self.hi.ln() - self.lo.ln()) * u).exp(),
        }
    }

    /// `n` evenly spaced points (in log space for log-uniform ranges).
    pub fn grid(&self, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![self.lo];
        }
        (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                match self.scale {
                    Scale::Uniform => self.lo + (self.hi - self.lo) * s,
                    Scale::LogUniform => (self.lo.ln() + (self.hi.ln() - self.lo.ln()) * s).exp(),
                }
            })
            .collect()
    }
}

/// Initial-condition distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSpec {
    pub temperature: ParamRange,
    pub pressure: ParamRange,
    pub fuel: ParamRange,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            temperature: ParamRange::uniform(300.0, 1200.0),
            pressure: ParamRange::log_uniform(1.0, 60.0),
            fuel: ParamRange::log_uniform(1e-6, 1e-1),
        }
    }
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.temperature.validate("temperature")?;
        self.pressure.validate("pressure")?;
        self.fuel.validate("fuel")
    }
}

pub fn sample_initial_condition<R: Rng + ?Sized>(rng: &mut R, spec: &SamplingSpec) -> Result<Condition, EnvError> {
    spec.validate()?;
    let temperature = spec.temperature.sample(rng);
    let pressure = spec.pressure.sample(rng);
    let fuel = spec.fuel.sample(rng);
    Ok(Condition { temperature, pressure, fuel })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Grid, tolerances and termination shared with the references.
    pub reference: ReferenceSettings,
    /// Accuracy tolerance of the constraint.
    pub epsilon: f64,
    /// QSS sub-steps per decision window.
    pub qss_substeps: u32,
    /// A QSS window that moves the problem's conserved quantities by more
    /// than this (relative) counts as failed.
    pub qss_max_drift: f64,
    pub error: ErrorWeights,
    /// Restrict the species error to the key species.
    pub key_species_error: bool,
    /// Saturation of the violation entering the reward and the multiplier
    /// update. Reported errors and violations stay raw.
    pub violation_cap: Option<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            reference: ReferenceSettings::default(),
            epsilon: 1e-3,
            qss_substeps: 10,
            qss_max_drift: 0.01,
            error: ErrorWeights::default(),
            key_species_error: false,
            violation_cap: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.reference.validate()?;
        if !(self.epsilon > 0.0) {
            return Err(EnvError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if let Some(cap) = self.violation_cap {
            if !(cap > 0.0) || !cap.is_finite() {
                return Err(EnvError::Config(format!("violation_cap must be finite and > 0, got {cap}")));
            }
        }
        if !(self.qss_max_drift > 0.0) {
            return Err(EnvError::Config(format!("qss_max_drift must be > 0, got {}", self.qss_max_drift)));
        }
        if self.qss_substeps == 0 {
            return Err(EnvError::Config("qss_substeps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dt_dec(&self) -> f64 {
        self.reference.dt_dec
    }
}

/// Feature standardization. Gradient features are only scaled, so a zero rate
/// stays exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Standardized features are clipped to `[-clip, clip]`.
    pub clip: f64,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim], clip: f64::MAX }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics of `samples` after winsorizing every feature to its
    /// `[q, 1 - q]` quantiles.
    pub fn fit(samples: &[Vec<f64>], n_key: usize, quantile: f64, clip: f64) -> Result<Self, EnvError> {
        let dim = feature_dim(n_key);
        if samples.is_empty() || samples.iter().any(|s| s.len() != dim) {
            return Err(EnvError::Config(format!("normalization needs samples of length {dim}")));
        }
        let n = samples.len();
        let mut mean = vec![0.0; dim];
        let mut std = vec![1.0; dim];
        for j in 0..dim {
            let mut col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            col.sort_by(f64::total_cmp);
            let lo = col[((n - 1) as f64 * quantile).round() as usize];
            let hi = col[((n - 1) as f64 * (1.0 - quantile)).round() as usize];
            let clipped: Vec<f64> = col.iter().map(|v| v.clamp(lo, hi)).collect();
            let centered = j < 2 + n_key;
            let m = if centered { clipped.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let var = clipped.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mean[j] = m;
            std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std, clip })
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| ((x - m) / s).clamp(-self.clip, self.clip))
            .collect()
    }
}

/// `3 + 2K` features for `K` key species.
pub fn feature_dim(n_key: usize) -> usize {
    3 + 2 * n_key
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
    /// Unnormalized features.
    pub raw: Vec<f64>,
}

/// Raw features `[T, log10(p/p_ref), log10(max(Y_k, floor)).., dT/dt, dY_k/dt..]`.
pub fn raw_features(problem: &dyn OdeProblem, state: &StateVector, prev: &StateVector, dt_dec: f64) -> Vec<f64> {
    let keys = &problem.observables().key_species;
    let mut f = Vec::with_capacity(feature_dim(keys.len()));
    f.push(state.temp);
    f.push((problem.pressure() / P_REF).log10());
    for &i in keys {
        f.push(state.y[i].max(LOG_FLOOR).log10());
    }
    f.push((state.temp - prev.temp) / dt_dec);
    for &i in keys {
        f.push((state.y[i] - prev.y[i]) / dt_dec);
    }
    for v in f.iter_mut() {
        if !v.is_finite() {
            *v = if v.is_nan() { 0.0 } else { v.signum() * f64::MAX };
        }
    }
    f
}

pub fn observe(
    problem: &dyn OdeProblem,
    state: &StateVector,
    prev: &StateVector,
    dt_dec: f64,
    norm: &FeatureNorm,
) -> Observation {
    let raw = raw_features(problem, state, prev, dt_dec);
    Observation { features: norm.apply(&raw), raw }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Bdf = 0,
    Qss = 1,
}

impl Action {
    pub fn from_index(i: usize) -> Result<Self, EnvError> {
        match i {
            0 => Ok(Action::Bdf),
            1 => Ok(Action::Qss),
            _ => Err(EnvError::InvalidAction(i)),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepInfo {
    pub k: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub stats: WorkStats,
    /// Work units charged (both solvers on fallback).
    pub work: f64,
    /// The chosen solver succeeded.
    pub success: bool,
    /// QSS failed and the window was recomputed with BDF.
    pub fallback: bool,
    /// BDF failed as well and the episode ended here.
    pub solver_failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    /// Observation the action was chosen on.
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub cost_norm: f64,
    pub error: f64,
    pub violation: f64,
    /// Violation as charged in the reward, after `violation_cap`.
    pub penalty: f64,
    pub done: bool,
    /// Multiplier the reward was computed with.
    pub lambda: f64,
    /// State at the end of the window.
    pub state: StateVector,
    pub info: StepInfo,
}

/// `r = -C - lambda * nu`.
pub fn reward(cost_norm: f64, violation: f64, lambda: f64) -> f64 {
    -cost_norm - lambda * violation
}

/// `nu = max(0, E - eps)`.
pub fn violation(error: f64, epsilon: f64) -> f64 {
    (error - epsilon).max(0.0)
}

/// Result of advancing one decision window with a chosen solver.
#[derive(Debug, Clone)]
pub struct WindowOutcome {
    pub state: StateVector,
    pub stats: WorkStats,
    /// The chosen solver succeeded.
    pub success: bool,
    /// QSS failed and BDF redid the window; `stats` holds both.
    pub fallback: bool,
    /// BDF failed too. `state` is then the start state, unchanged.
    pub failure: Option<IntegratorError>,
}

impl WindowOutcome {
    pub fn into_result(self, t0: f64, t1: f64) -> Result<Self, EnvError> {
        match self.failure {
            Some(source) => Err(EnvError::SolverFailure { t0, t1, source }),
            None => Ok(self),
        }
    }
}

/// Advances `state` to `t_end` with `action`. QSS failures fall back to BDF
/// from the same start state and are charged for both attempts. A BDF failure
/// is reported in [`WindowOutcome::failure`] with the work it spent.
pub fn advance_window(
    problem: &dyn OdeProblem,
    state: &StateVector,
    t_end: f64,
    action: Action,
    config: &EnvConfig,
) -> Result<WindowOutcome, EnvError> {
    let run_bdf = |prior: WorkStats, fallback: bool| -> Result<WindowOutcome, EnvError> {
        let out = bdf_integrate(problem, state, t_end, &config.reference.operational)?;
        let stats = prior + out.stats;
        if out.success && out.state.is_finite() {
            return Ok(WindowOutcome { state: out.state, stats, success: !fallback, fallback, failure: None });
        }
        let failure = out.failure.unwrap_or(IntegratorError::NonFiniteState { t: out.state.t });
        Ok(WindowOutcome { state: state.clone(), stats, success: false, fallback, failure: Some(failure) })
    };
    match action {
        Action::Bdf => run_bdf(WorkStats::default(), false),
        Action::Qss => {
            let dt_sub = (t_end - state.t) / config.qss_substeps as f64;
            let out = qss_integrate(problem, state, t_end, dt_sub)?;
            let sane = out.state.is_finite() && problem.invariant_drift(state, &out.state) <= config.qss_max_drift;
            if out.success && sane {
                Ok(WindowOutcome { state: out.state, stats: out.stats, success: true, fallback: false, failure: None })
            } else {
                run_bdf(out.stats, true)
            }
        }
    }
}

/// One episode over a reference grid.
#[derive(Debug, Clone)]
pub struct Env {
    problem: Arc<dyn OdeProblem>,
    reference: Arc<ReferenceTrajectory>,
    config: EnvConfig,
    norm: Arc<FeatureNorm>,
    weights: CostWeights,
    state: StateVector,
    prev: StateVector,
    k: usize,
    done: bool,
}

impl Env {
    pub fn new(
        problem: Arc<dyn OdeProblem>,
        reference: Arc<ReferenceTrajectory>,
        config: EnvConfig,
        norm: Arc<FeatureNorm>,
    ) -> Result<Self, EnvError> {
        config.validate()?;
        let n_key = problem.observables().key_species.len();
        if norm.dim() != feature_dim(n_key) {
            return Err(EnvError::Config(format!(
                "normalization has {} features, problem needs {}",
                norm.dim(),
                feature_dim(n_key)
            )));
        }
        if reference.states.len() < 2 || reference.states[0].y.len() != problem.n_species() {
            return Err(EnvError::Config("reference does not match the problem".into()));
        }
        let state = reference.states[0].clone();
        Ok(Self {
            weights: CostWeights::for_dimension(problem.n_state()),
            problem,
            reference,
            config,
            norm,
            prev: state.clone(),
            state,
            k: 0,
            done: false,
        })
    }

    /// Restarts at the reference initial state and returns the first
    /// observation (gradient features are zero).
    pub fn reset(&mut self) -> Observation {
        self.state = self.reference.states[0].clone();
        self.prev = self.state.clone();
        self.k = 0;
        self.done = false;
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        observe(self.problem.as_ref(), &self.state, &self.prev, self.config.dt_dec(), &self.norm)
    }

    pub fn state(&self) -> &StateVector {
        &self.state
    }

    pub fn problem(&self) -> &Arc<dyn OdeProblem> {
        &self.problem
    }

    pub fn reference(&self) -> &Arc<ReferenceTrajectory> {
        &self.reference
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn n_windows(&self) -> usize {
        self.reference.n_windows()
    }

    fn species_subset(&self) -> Option<&[usize]> {
        self.config.key_species_error.then(|| self.problem.observables().key_species.as_slice())
    }

    /// Advances one decision window with the chosen solver.
    pub fn step(&mut self, action: Action, lambda: f64) -> Result<Transition, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let obs = self.observation();
        let t_start = self.reference.times[self.k];
        let t_end = self.reference.times[self.k + 1];
        debug_assert!((self.state.t - t_start).abs() <= 1e-12 * t_end.abs().max(1.0));
        let w = advance_window(self.problem.as_ref(), &self.state, t_end, action, &self.config)?;
        let failed = w.failure.is_some();
        let (mut next, stats, success, fallback) = (w.state, w.stats, w.success, w.fallback);
        // an unrecoverable window ends the episode at the held start state
        next.t = t_end;

        let work = stats.work_units(&self.weights);
        let cost_norm = work / self.reference.baseline_cost_mean;
        let error = error_metric(&next, &self.reference.states[self.k + 1], &self.config.error, self.species_subset())?;
        let nu = violation(error, self.config.epsilon);
        let penalty = self.config.violation_cap.map_or(nu, |cap| nu.min(cap));

        self.prev = std::mem::replace(&mut self.state, next);
        self.k += 1;
        self.done = failed || self.k >= self.reference.n_windows();

        Ok(Transition {
            obs,
            action,
            reward: reward(cost_norm, penalty, lambda),
            cost_norm,
            error,
            violation: nu,
            penalty,
            done: self.done,
            lambda,
            state: self.state.clone(),
            info: StepInfo { k: self.k - 1, t_start, t_end, stats, work, success, fallback, solver_failed: failed },
        })
    }
}

/// A problem instance with its precomputed reference.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub problem: Arc<dyn OdeProblem>,
    pub reference: Arc<ReferenceTrajectory>,
}

/// Raw features of `n_states` observations from episodes with uniformly random
/// actions over randomly drawn pool entries.
///
/// An episode is cut once a window error exceeds `max_error`, so states that
/// have left the trajectory (diverged QSS windows) do not set the scales.
pub fn warmup_features<R: Rng + ?Sized>(
    pool: &[PoolEntry],
    config: &EnvConfig,
    n_states: usize,
    max_error: Option<f64>,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, EnvError> {
    if pool.is_empty() {
        return Err(EnvError::Config("empty condition pool".into()));
    }
    let n_key = pool[0].problem.observables().key_species.len();
    let ident = Arc::new(FeatureNorm::identity(feature_dim(n_key)));
    let mut out = Vec::with_capacity(n_states);
    while out.len() < n_states {
        let entry = &pool[rng.gen_range(0..pool.len())];
        let mut env = Env::new(entry.problem.clone(), entry.reference.clone(), *config, ident.clone())?;
        let mut obs = env.reset();
        while out.len() < n_states {
            out.push(obs.raw);
            let action = if rng.gen::<bool>() { Action::Qss } else { Action::Bdf };
            let tr = env.step(action, 0.0)?;
            if env.is_done() || max_error.is_some_and(|m| !(tr.error <= m)) {
                break;
            }
            obs = env.observation();
        }
    }
    Ok(out)
}

/// Writes one CSV row per transition.
pub fn write_transitions_csv(path: &Path, transitions: &[Transition]) -> Result<(), EnvError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "k", "t_start", "t_end", "action", "reward", "cost_norm", "work", "error", "violation", "lambda", "done",
        "fallback", "temperature",
    ])?;
    for tr in transitions {
        w.write_record([
            tr.info.k.to_string(),
            tr.info.t_start.to_string(),
            tr.info.t_end.to_string(),
            tr.action.index().to_string(),
            tr.reward.to_string(),
            tr.cost_norm.to_string(),
            tr.info.work.to_string(),
            tr.error.to_string(),
            tr.violation.to_string(),
            tr.lambda.to_string(),
            (tr.done as u8).to_string(),
            (tr.info.fallback as u8).to_string(),
            tr.state.temp.to_string(),
        ])?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| e.into_error())?.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reward_arithmetic() {
        assert_eq!(reward(1.0, violation(2e-3, 1e-3), 10.0), -1.0 - 10.0 * 1e-3);
        assert_eq!(reward(0.7, violation(5e-4, 1e-3), 10.0), -0.7);
        assert!((reward(1.0, violation(2e-3, 1e-3), 10.0) + 1.01).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_empty_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = ParamRange::log_uniform(3.7, 3.7);
        assert_eq!(r.sample(&mut rng), 3.7);
        assert!(ParamRange::uniform(2.0, 1.0).validate("x").is_err());
        assert!(ParamRange::log_uniform(0.0, 1.0).validate("x").is_err());
        let spec = SamplingSpec { fuel: ParamRange::uniform(1.0, 0.5), ..Default::default() };
        assert!(sample_initial_condition(&mut rng, &spec).is_err());
    }

    #[test]
    fn log_uniform_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = ParamRange::log_uniform(1.0, 100.0);
        let mut v: Vec<f64> = (0..100_000).map(|_| r.sample(&mut rng)).collect();
        v.sort_by(f64::total_cmp);
        let median = v[v.len() / 2];
        assert!((median / 10.0 - 1.0).abs() < 0.05, "{median}");
    }

    #[test]
    fn fit_leaves_gradient_features_uncentered() {
        let samples: Vec<Vec<f64>> = (0..100).map(|i| vec![1000.0 + i as f64, 0.0, -3.0, 5.0 + i as f64, -2.0 * i as f64]).collect();
        let norm = FeatureNorm::fit(&samples, 1, 0.0, 10.0).unwrap();
        assert!((norm.mean[0] - 1049.5).abs() < 1e-9);
        assert_eq!(norm.mean[3], 0.0);
        assert_eq!(norm.mean[4], 0.0);
        assert_eq!(norm.std[1], 1.0);
        assert_eq!(norm.apply(&[1049.5, 0.0, -3.0, 0.0, 0.0])[3], 0.0);
    }
}
