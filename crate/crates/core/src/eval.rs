//! Evaluation protocol: baselines, speedups, ignition delay, temperature RMSE
//! and solver-usage statistics.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Env, EnvConfig, EnvError, Transition};
use crate::kinetics::{finite_difference_jacobian, Condition, OdeProblem, StateVector, FD_EPS_REL};
use crate::policy::{greedy, sample_and_logprob, Checkpoint, PolicyError};
use crate::reference::ReferenceTrajectory;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ignition: temperature rise below {0}")]
    NoIgnition(f64),
    #[error("trajectory needs at least 3 samples, got {0}")]
    TooShort(usize),
    #[error("evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Minimum temperature rise for a trajectory to count as igniting.
pub const MIN_IGNITION_RISE: f64 = 1.0;

/// Time of the maximum centered-difference `dT/dt`; the earliest on ties.
pub fn ignition_delay(times: &[f64], temps: &[f64]) -> Result<f64, EvalError> {
    let n = temps.len();
    if n < 3 || times.len() != n {
        return Err(EvalError::TooShort(n.min(times.len())));
    }
    let peak = temps.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    if !(peak - temps[0] > MIN_IGNITION_RISE) {
        return Err(EvalError::NoIgnition(MIN_IGNITION_RISE));
    }
    let mut best = 1;
    let mut best_rate = f64::NEG_INFINITY;
    for k in 1..n - 1 {
        let rate = (temps[k + 1] - temps[k - 1]) / (times[k + 1] - times[k - 1]);
        if rate > best_rate {
            best_rate = rate;
            best = k;
        }
    }
    Ok(times[best])
}


/// Returned by [`usage_localization`] when the policy never uses BDF outside
/// the ignition window but does inside it.
pub const LOCALIZATION_SENTINEL: f64 = 1e9;

/// Half-width of the ignition window, relative to the ignition delay.
pub const IGNITION_WINDOW_REL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Greedy,
    Sample { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepChoice {
    pub t_start: f64,
    pub t_end: f64,
    pub action: Action,
    pub fallback: bool,
    pub error: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub condition: Option<Condition>,
    pub n_windows: usize,
    /// Always-BDF work over the reference grid.
    pub cost_bdf: f64,
    /// Always-QSS work, from a live episode.
    pub cost_qss: f64,
    pub cost_rl: f64,
    pub speedup_vs_bdf: f64,
    pub speedup_qss_vs_bdf: f64,
    pub ignition_delay_ref: Option<f64>,
    pub ignition_delay_qss: Option<f64>,
    pub ignition_delay_rl: Option<f64>,
    pub ignition_delay_error_pct: Option<f64>,
    /// RMSE of the temperature on the decision grid.
    pub temperature_rmse: f64,
    pub mean_error: f64,
    pub max_error: f64,
    pub mean_violation: f64,
    pub bdf_usage_fraction: f64,
    pub fallbacks: usize,
    /// Forward-pass flops over forward plus solver flops.
    pub inference_overhead_fraction: f64,
    pub choices: Vec<StepChoice>,
}

/// What a solver-only episode (always one action) produced.
#[derive(Debug, Clone)]
pub struct FixedRun {
    pub cost: f64,
    pub transitions: Vec<Transition>,
}

/// Runs a full episode with one fixed action.
pub fn run_fixed(env: &mut Env, action: Action) -> Result<FixedRun, EvalError> {
    env.reset();
    let mut transitions = Vec::with_capacity(env.n_windows());
    while !env.is_done() {
        transitions.push(env.step(action, 0.0)?);
    }
    Ok(FixedRun { cost: transitions.iter().map(|t| t.info.work).sum(), transitions })
}

/// Total always-BDF work, from the stored per-window baseline.
pub fn cost_bdf(reference: &ReferenceTrajectory) -> f64 {
    reference.baseline_costs.iter().sum()
}

fn episode_temperatures(reference: &ReferenceTrajectory, transitions: &[Transition]) -> Vec<f64> {
    std::iter::once(reference.states[0].temp).chain(transitions.iter().map(|t| t.state.temp)).collect()
}

/// Root-mean-square temperature difference over the decision points after the
/// initial one.
pub fn temperature_rmse(reference: &ReferenceTrajectory, transitions: &[Transition]) -> f64 {
    if transitions.is_empty() {
        return 0.0;
    }
    let sq: f64 = transitions
        .iter()
        .zip(&reference.states[1..])
        .map(|(t, r)| (t.state.temp - r.temp).powi(2))
        .sum();
    (sq / transitions.len() as f64).sqrt()
}

/// Runs the policy in `checkpoint` over the reference grid and compares it
/// with both fixed-solver baselines.
pub fn run_policy_episode(
    problem: Arc<dyn OdeProblem>,
    reference: Arc<ReferenceTrajectory>,
    config: &EnvConfig,
    checkpoint: &Checkpoint,
    mode: Mode,
) -> Result<(EpisodeReport, Vec<Transition>), EvalError> {
    let norm = Arc::new(checkpoint.norm.clone());
    let mut env = Env::new(problem.clone(), reference.clone(), *config, norm)?;
    let qss = run_fixed(&mut env, Action::Qss)?;

    let mut rng = match mode {
        Mode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Greedy => None,
    };
    let mut obs = env.reset();
    let mut transitions = Vec::with_capacity(env.n_windows());
    let mut forward_madds = 0u64;
    while !env.is_done() {
        let out = checkpoint.params.forward(&obs.features)?;
        forward_madds += out.cache.multiply_adds;
        let a = match rng.as_mut() {
            Some(r) => sample_and_logprob(&out.logits, r).0,
            None => greedy(&out.logits),
        };
        transitions.push(env.step(Action::from_index(a)?, 0.0)?);
        obs = env.observation();
    }

    let cost_bdf = cost_bdf(&reference);
    let cost_rl: f64 = transitions.iter().map(|t| t.info.work).sum();
    let n = transitions.len().max(1) as f64;
    let times = &reference.times;
    let t_ign = |tr: &[Transition]| ignition_delay(times, &episode_temperatures(&reference, tr)).ok();
    let ignition_delay_ref = reference.ignition_delay;
    let ignition_delay_rl = t_ign(&transitions);
    let ignition_delay_error_pct = match (ignition_delay_ref, ignition_delay_rl) {
        (Some(r), Some(x)) => Some(100.0 * (x - r).abs() / r),
        _ => None,
    };
    let solver_flops = cost_rl * problem.rhs_flops();
    let nn_flops = 2.0 * forward_madds as f64;
    let report = EpisodeReport {
        condition: reference.condition,
        n_windows: transitions.len(),
        cost_bdf,
        cost_qss: qss.cost,
        cost_rl,
        speedup_vs_bdf: cost_bdf / cost_rl,
        speedup_qss_vs_bdf: cost_bdf / qss.cost,
        ignition_delay_ref,
        ignition_delay_qss: t_ign(&qss.transitions),
        ignition_delay_rl,
        ignition_delay_error_pct,
        temperature_rmse: temperature_rmse(&reference, &transitions),
        mean_error: transitions.iter().map(|t| t.error).sum::<f64>() / n,
        max_error: transitions.iter().map(|t| t.error).fold(0.0, f64::max),
        mean_violation: transitions.iter().map(|t| t.violation).sum::<f64>() / n,
        bdf_usage_fraction: transitions.iter().filter(|t| t.action == Action::Bdf).count() as f64 / n,
        fallbacks: transitions.iter().filter(|t| t.info.fallback).count(),
        inference_overhead_fraction: nn_flops / (nn_flops + solver_flops),
        choices: transitions
            .iter()
            .map(|t| StepChoice {
                t_start: t.info.t_start,
                t_end: t.info.t_end,
                action: t.action,
                fallback: t.info.fallback,
                error: t.error,
                temperature: t.state.temp,
            })
            .collect(),
    };
    Ok((report, transitions))
}

/// BDF usage inside `t_ign * (1 +- 0.1)` over BDF usage outside it, by window
/// midpoint. A window with no BDF use at all counts as unconcentrated (1).
pub fn usage_localization(choices: &[StepChoice], t_ign: f64) -> Result<f64, EvalError> {
    let (lo, hi) = (t_ign * (1.0 - IGNITION_WINDOW_REL), t_ign * (1.0 + IGNITION_WINDOW_REL));
    let (mut n_in, mut bdf_in, mut n_out, mut bdf_out) = (0usize, 0usize, 0usize, 0usize);
    for c in choices {
        let mid = 0.5 * (c.t_start + c.t_end);
        let is_bdf = (c.action == Action::Bdf) as usize;
        if (lo..=hi).contains(&mid) {
            n_in += 1;
            bdf_in += is_bdf;
        } else {
            n_out += 1;
            bdf_out += is_bdf;
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(EvalError::Config("ignition window must contain some but not all steps".into()));
    }
    let f_in = bdf_in as f64 / n_in as f64;
    let f_out = bdf_out as f64 / n_out as f64;
    Ok(match (bdf_in, bdf_out) {
        (0, 0) => 1.0,
        (_, 0) => LOCALIZATION_SENTINEL,
        _ => f_in / f_out,
    })
}

/// Localization ratio of a report, using the reference ignition delay.
pub fn report_localization(report: &EpisodeReport) -> Result<f64, EvalError> {
    let t = report.ignition_delay_ref.ok_or(EvalError::NoIgnition(MIN_IGNITION_RISE))?;
    usage_localization(&report.choices, t)
}

/// One problem instance of a sweep.
#[derive(Debug, Clone)]
pub struct SweepCase {
    pub problem: Arc<dyn OdeProblem>,
    pub reference: Arc<ReferenceTrajectory>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_speedup: f64,
    pub min_speedup: f64,
    pub max_speedup: f64,
    pub mean_qss_speedup: f64,
}

/// Evaluates every case, recording failures per row and carrying on.
pub fn sweep(
    cases: &[SweepCase],
    config: &EnvConfig,
    checkpoint: &Checkpoint,
) -> (Vec<Result<EpisodeReport, String>>, SweepSummary) {
    let rows: Vec<Result<EpisodeReport, String>> = cases
        .iter()
        .map(|c| {
            run_policy_episode(c.problem.clone(), c.reference.clone(), config, checkpoint, Mode::Greedy)
                .map(|(r, _)| r)
                .map_err(|e| e.to_string())
        })
        .collect();
    let ok: Vec<&EpisodeReport> = rows.iter().filter_map(|r| r.as_ref().ok()).collect();
    let speedups: Vec<f64> = ok.iter().map(|r| r.speedup_vs_bdf).collect();
    let n = speedups.len().max(1) as f64;
    let summary = SweepSummary {
        n_ok: ok.len(),
        n_failed: rows.len() - ok.len(),
        mean_speedup: speedups.iter().sum::<f64>() / n,
        min_speedup: speedups.iter().copied().fold(f64::INFINITY, f64::min),
        max_speedup: speedups.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_qss_speedup: ok.iter().map(|r| r.speedup_qss_vs_bdf).sum::<f64>() / n,
    };
    (rows, summary)
}

/// Version of the sweep CSV columns.
pub const SWEEP_CSV_VERSION: u32 = 1;

/// One row per case; failed rows keep the condition and the error message.
pub fn write_sweep_csv(
    path: &Path,
    cases: &[SweepCase],
    rows: &[Result<EpisodeReport, String>],
) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "csv_version", "temperature", "pressure", "fuel", "status", "cost_bdf", "cost_qss", "cost_rl",
        "speedup_vs_bdf", "speedup_qss_vs_bdf", "ignition_delay_ref", "ignition_delay_rl", "ignition_delay_error_pct",
        "temperature_rmse", "mean_error", "max_error", "mean_violation", "bdf_usage_fraction", "fallbacks",
        "inference_overhead_fraction", "message",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (case, row) in cases.iter().zip(rows) {
        let c = case.reference.condition;
        let mut rec = vec![
            SWEEP_CSV_VERSION.to_string(),
            opt(c.map(|c| c.temperature)),
            opt(c.map(|c| c.pressure)),
            opt(c.map(|c| c.fuel)),
        ];
        match row {
            Ok(r) => {
                rec.push("ok".into());
                rec.extend([r.cost_bdf, r.cost_qss, r.cost_rl, r.speedup_vs_bdf, r.speedup_qss_vs_bdf].map(|v| v.to_string()));
                rec.extend([r.ignition_delay_ref, r.ignition_delay_rl, r.ignition_delay_error_pct].map(opt));
                rec.extend(
                    [r.temperature_rmse, r.mean_error, r.max_error, r.mean_violation, r.bdf_usage_fraction]
                        .map(|v| v.to_string()),
                );
                rec.push(r.fallbacks.to_string());
                rec.push(r.inference_overhead_fraction.to_string());
                rec.push(String::new());
            }
            Err(msg) => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n(String::new(), 15));
                rec.push(msg.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step choices of one episode, for plotting usage against time.
pub fn write_choices_csv(path: &Path, report: &EpisodeReport) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for c in &report.choices {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

/// Ratio of the largest to the smallest non-negligible `|Re(lambda)|` of the
/// finite-difference Jacobian at `state`.
pub fn stiffness_ratio(problem: &dyn OdeProblem, state: &StateVector) -> Result<f64, EvalError> {
    let jac: DMatrix<f64> = finite_difference_jacobian(problem, state, FD_EPS_REL)
        .map_err(|e| EvalError::Config(e.to_string()))?;
    let re: Vec<f64> = jac.complex_eigenvalues().iter().map(|z| z.re.abs()).collect();
    let max = re.iter().copied().fold(0.0, f64::max);
    let min = re.iter().copied().filter(|&v| v > 1e-12 * max).fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !min.is_finite() {
        return Err(EvalError::Config("Jacobian has no non-zero eigenvalues".into()));
    }
    Ok(max / min)
}
