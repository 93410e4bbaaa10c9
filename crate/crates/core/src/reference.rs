//! Tight-tolerance reference trajectories on the decision grid, the per-window
//! baseline BDF cost, and the composite error metric.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::ignition_delay;
use crate::integrators::{bdf_integrate, BdfOptions, CostWeights, IntegratorError};
use crate::kinetics::{Condition, KineticsError, OdeProblem, ProblemSpec, StateVector};

pub const REFERENCE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("reference generation failed at t = {t}: {reason}")]
    GenerationFailed { t: f64, reason: String },
    #[error("error metric: {0}")]
    Metric(String),
    #[error("invalid reference settings: {0}")]
    Settings(String),
    #[error("reference parameters hash mismatch (expected {expected}, file has {found})")]
    HashMismatch { expected: String, found: String },
    #[error("reference file content does not match its checksum")]
    Corrupt,
    #[error("unsupported reference format version {0}")]
    Version(u32),
    #[error(transparent)]
    Problem(#[from] KineticsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How a reference trajectory is generated. Part of the parameters hash.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSettings {
    pub t_final: f64,
    pub dt_dec: f64,
    pub rtol_ref: f64,
    pub atol_ref: f64,
    /// Tolerances of the production BDF whose cost defines the baseline.
    pub operational: BdfOptions,
    /// The grid ends `stop_margin_windows` windows after the reference
    /// temperature first reaches `t_stop`.
    pub t_stop: f64,
    pub stop_margin_windows: usize,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        Self {
            t_final: 0.01,
            dt_dec: 0.01 / 2000.0,
            rtol_ref: 1e-10,
            atol_ref: 1e-14,
            operational: BdfOptions::with_tolerances(1e-6, 1e-10),
            t_stop: 2500.0,
            stop_margin_windows: 0,
        }
    }
}

impl ReferenceSettings {
    pub fn validate(&self) -> Result<(), ReferenceError> {
        if !(self.dt_dec > 0.0) || !(self.t_final > 0.0) {
            return Err(ReferenceError::Settings(format!(
                "dt_dec and t_final must be > 0 (dt_dec = {}, t_final = {})",
                self.dt_dec, self.t_final
            )));
        }
        if !(self.rtol_ref > 0.0) || !(self.atol_ref > 0.0) {
            return Err(ReferenceError::Settings("reference tolerances must be > 0".into()));
        }
        Ok(())
    }

    /// Number of windows before any early stop.
    pub fn n_windows(&self) -> usize {
        (self.t_final / self.dt_dec - 1e-9).ceil().max(1.0) as usize
    }

    pub fn window_end(&self, k: usize) -> f64 {
        ((k + 1) as f64 * self.dt_dec).min(self.t_final)
    }
}

/// Everything a reference depends on; its hash names and validates files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceKey {
    pub problem: ProblemSpec,
    pub condition: Condition,
    pub settings: ReferenceSettings,
}

impl ReferenceKey {
    pub fn params_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("reference key serializes");
        hex_digest(&bytes)
    }

    pub fn file_name(&self) -> String {
        format!("ref_{}.json", &self.params_hash()[..16])
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub format_version: u32,
    pub problem_id: String,
    pub params_hash: String,
    /// Sampled condition, when generated from a [`ReferenceKey`].
    pub condition: Option<Condition>,
    pub settings: ReferenceSettings,
    /// Decision times `t_0 .. t_K`.
    pub times: Vec<f64>,
    /// Reference state at every decision time.
    pub states: Vec<StateVector>,
    /// Work units of the operational BDF for each window `[t_k, t_k+1]`, run
    /// as an always-BDF episode from the initial condition.
    pub baseline_costs: Vec<f64>,
    pub baseline_cost_mean: f64,
    /// Ignition delay of the reference, if the temperature rises.
    pub ignition_delay: Option<f64>,
    /// Checksum over the arrays, written on save and verified on load.
    #[serde(default)]
    pub content_hash: String,
}

impl ReferenceTrajectory {
    pub fn n_windows(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt_dec(&self) -> f64 {
        self.settings.dt_dec
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.temp).collect()
    }

    fn compute_content_hash(&self) -> String {
        let arrays = (&self.times, &self.states, &self.baseline_costs, self.baseline_cost_mean, self.ignition_delay);
        hex_digest(&serde_json::to_vec(&arrays).expect("arrays serialize"))
    }

    pub fn save(&self, path: &Path) -> Result<(), ReferenceError> {
        let mut out = self.clone();
        out.content_hash = self.compute_content_hash();
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(&out)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a reference and checks its version, checksum and, when given,
    /// its parameters hash.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self, ReferenceError> {
        let traj: ReferenceTrajectory = serde_json::from_slice(&fs::read(path)?)?;
        if traj.format_version != REFERENCE_FORMAT_VERSION {
            return Err(ReferenceError::Version(traj.format_version));
        }
        if let Some(expected) = expected_hash {
            if traj.params_hash != expected {
                return Err(ReferenceError::HashMismatch { expected: expected.into(), found: traj.params_hash });
            }
        }
        if traj.content_hash != traj.compute_content_hash() {
            return Err(ReferenceError::Corrupt);
        }
        Ok(traj)
    }
}

/// Generates the reference for `key` (instantiating its problem).
pub fn generate_for(key: &ReferenceKey) -> Result<ReferenceTrajectory, ReferenceError> {
    let problem = key.problem.instantiate(&key.condition)?;
    let ic = key.problem.initial_state(&key.condition);
    let mut traj = generate_reference(problem.as_ref(), &ic, &key.settings)?;
    traj.params_hash = key.params_hash();
    traj.condition = Some(key.condition);
    Ok(traj)
}

/// Integrates the reference window by window at the reference tolerances and,
/// alongside it, an always-BDF run at operational tolerances whose per-window
/// work forms the cost baseline.
pub fn generate_reference(
    problem: &dyn OdeProblem,
    ic: &StateVector,
    settings: &ReferenceSettings,
) -> Result<ReferenceTrajectory, ReferenceError> {
    settings.validate()?;
    let tight = BdfOptions { rtol: settings.rtol_ref, atol: settings.atol_ref, ..settings.operational };
    let weights = CostWeights::for_dimension(problem.n_state());
    let t0 = ic.t;
    let n_max = settings.n_windows();

    let mut times = vec![t0];
    let mut states = vec![ic.clone()];
    let mut costs = Vec::new();
    let mut ref_state = ic.clone();
    let mut op_state = ic.clone();
    let mut stop_at: Option<usize> = None;
    let failed = |t: f64, e: String| ReferenceError::GenerationFailed { t, reason: e };

    for k in 0..n_max {
        let t_end = t0 + settings.window_end(k);
        let out = bdf_integrate(problem, &ref_state, t_end, &tight).map_err(|e| failed(ref_state.t, e.to_string()))?;
        if !out.success {
            let reason = out.failure.map(|e: IntegratorError| e.to_string()).unwrap_or_default();
            return Err(failed(out.state.t, reason));
        }
        ref_state = out.state;

        let op = bdf_integrate(problem, &op_state, t_end, &settings.operational)
            .map_err(|e| failed(op_state.t, e.to_string()))?;
        if !op.success {
            let reason = op.failure.map(|e| e.to_string()).unwrap_or_default();
            return Err(failed(op.state.t, format!("operational baseline: {reason}")));
        }
        costs.push(op.stats.work_units(&weights));
        op_state = op.state;

        times.push(t_end);
        states.push(ref_state.clone());
        if stop_at.is_none() && ref_state.temp >= settings.t_stop {
            stop_at = Some(k + settings.stop_margin_windows);
        }
        if stop_at == Some(k) {
            break;
        }
    }

    let baseline_cost_mean = costs.iter().sum::<f64>() / costs.len() as f64;
    let temps: Vec<f64> = states.iter().map(|s| s.temp).collect();
    let ignition = ignition_delay(&times, &temps).ok();
    Ok(ReferenceTrajectory {
        format_version: REFERENCE_FORMAT_VERSION,
        problem_id: problem.id().to_string(),
        params_hash: String::new(),
        condition: None,
        settings: *settings,
        times,
        states,
        baseline_costs: costs,
        baseline_cost_mean,
        ignition_delay: ignition,
        content_hash: String::new(),
    })
}

/// Weights and floors of the composite error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorWeights {
    pub alpha_t: f64,
    pub alpha_y: f64,
    pub eps_t: f64,
    pub eps_y: f64,
}

impl Default for ErrorWeights {
    fn default() -> Self {
        Self { alpha_t: 0.7, alpha_y: 0.3, eps_t: 1e-12, eps_y: 1e-12 }
    }
}

/// `E = aT |T - T_ref| / (|T_ref| + eT) + aY |Y - Y_ref|_2 / (|Y_ref|_2 + eY)`.
///
/// `species` selects which entries enter the species norm (`None` = all).
pub fn error_metric(
    sel: &StateVector,
    reference: &StateVector,
    w: &ErrorWeights,
    species: Option<&[usize]>,
) -> Result<f64, ReferenceError> {
    if sel.y.len() != reference.y.len() {
        return Err(ReferenceError::Metric(format!(
            "state dimensions differ ({} vs {})",
            sel.y.len(),
            reference.y.len()
        )));
    }
    if ((w.alpha_t + w.alpha_y) - 1.0).abs() > 1e-12 {
        return Err(ReferenceError::Metric(format!(
            "alpha_t + alpha_y must equal 1, got {}",
            w.alpha_t + w.alpha_y
        )));
    }
    let (mut diff2, mut ref2) = (0.0, 0.0);
    let mut add = |i: usize| {
        let d = sel.y[i] - reference.y[i];
        diff2 += d * d;
        ref2 += reference.y[i] * reference.y[i];
    };
    match species {
        Some(idx) => {
            for &i in idx {
                if i >= sel.y.len() {
                    return Err(ReferenceError::Metric(format!("species index {i} out of range")));
                }
                add(i);
            }
        }
        None => (0..sel.y.len()).for_each(add),
    }
    let e_t = (sel.temp - reference.temp).abs() / (reference.temp.abs() + w.eps_t);
    let e_y = diff2.sqrt() / (ref2.sqrt() + w.eps_y);
    Ok(w.alpha_t * e_t + w.alpha_y * e_y)
}
