//! One-dimensional reaction-diffusion by Strang splitting, with the chemistry
//! solver chosen per cell by a 0D-trained policy.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{advance_window, observe, Action, EnvConfig, EnvError};
use crate::integrators::{CostWeights, WorkStats};
use crate::kinetics::{Condition, OdeProblem, ProblemSpec, StateVector};
use crate::policy::{greedy, Checkpoint, PolicyError};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("invalid 1D setup: {0}")]
    Config(String),
    #[error("diffusion number {0} exceeds the explicit limit 0.5")]
    Cfl(f64),
    #[error("chemistry failed in cell {cell}: {source}")]
    Chemistry { cell: usize, source: EnvError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Uniform cells with fixed-value (ghost cell) ends and a single diffusivity
/// shared by every field.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    pub dx: f64,
    pub kappa: f64,
    pub cells: Vec<StateVector>,
    pub left: StateVector,
    pub right: StateVector,
}

impl Grid1D {
    pub fn new(cells: Vec<StateVector>, dx: f64, kappa: f64, left: StateVector, right: StateVector) -> Result<Self, SplitError> {
        if cells.len() < 3 {
            return Err(SplitError::Config(format!("need at least 3 cells, got {}", cells.len())));
        }
        if !(dx > 0.0) || !(kappa >= 0.0) {
            return Err(SplitError::Config(format!("need dx > 0 and kappa >= 0 (dx = {dx}, kappa = {kappa})")));
        }
        let n = cells[0].y.len();
        if cells.iter().chain([&left, &right]).any(|c| c.y.len() != n) {
            return Err(SplitError::Config("cells have different state sizes".into()));
        }
        Ok(Self { dx, kappa, cells, left, right })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells()).map(|i| (i as f64 + 0.5) * self.dx).collect()
    }

    pub fn diffusion_number(&self, dt: f64) -> f64 {
        self.kappa * dt / (self.dx * self.dx)
    }

    pub fn check_cfl(&self, dt: f64) -> Result<(), SplitError> {
        let r = self.diffusion_number(dt);
        if r > 0.5 {
            return Err(SplitError::Cfl(r));
        }
        Ok(())
    }

    /// One explicit central-difference step of size `dt` on every field.
    pub fn diffuse(&mut self, dt: f64) {
        let r = self.diffusion_number(dt);
        if r == 0.0 {
            return;
        }
        let flat: Vec<Vec<f64>> = std::iter::once(&self.left)
            .chain(&self.cells)
            .chain(std::iter::once(&self.right))
            .map(StateVector::to_flat)
            .collect();
        for (i, cell) in self.cells.iter_mut().enumerate() {
            let (l, c, rr) = (&flat[i], &flat[i + 1], &flat[i + 2]);
            let next: Vec<f64> = (0..c.len()).map(|j| c[j] + r * (l[j] - 2.0 * c[j] + rr[j])).collect();
            *cell = StateVector::from_flat(&next, cell.t);
        }
    }

    /// A full diffusion step of size `dt`, taken as two half steps so it
    /// coincides with the transport part of one split step.
    pub fn diffusion_step(&mut self, dt: f64) {
        self.diffuse(0.5 * dt);
        self.diffuse(0.5 * dt);
    }

    /// Sum over cells of every flat field, times `dx`.
    pub fn integrals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cells[0].y.len() + 1];
        for c in &self.cells {
            for (o, v) in out.iter_mut().zip(c.to_flat()) {
                *o += v * self.dx;
            }
        }
        out
    }
}

/// Who picks the chemistry solver of each cell.
#[derive(Debug, Clone, Copy)]
pub enum Chooser<'a> {
    /// Greedy action of a policy on the cell's observation.
    Policy(&'a Checkpoint),
    Fixed(Action),
}

/// Per-cell outcome of one split step.
#[derive(Debug, Clone)]
pub struct SplitStepReport {
    pub choices: Vec<Action>,
    pub stats: Vec<WorkStats>,
    pub work: Vec<f64>,
    pub fallbacks: usize,
}

/// Running state of a split simulation: the grid plus each cell's
/// chemistry-start state from the previous step (for gradient features).
#[derive(Debug, Clone)]
pub struct SplitState {
    pub grid: Grid1D,
    pub prev: Vec<StateVector>,
    pub step: usize,
}

impl SplitState {
    pub fn new(grid: Grid1D) -> Self {
        let prev = grid.cells.clone();
        Self { grid, prev, step: 0 }
    }
}

/// Half diffusion, per-cell chemistry over `dt` with the chosen solvers, half
/// diffusion.
pub fn split_step(
    state: &mut SplitState,
    problem: &dyn OdeProblem,
    chooser: Chooser<'_>,
    config: &EnvConfig,
    dt: f64,
) -> Result<SplitStepReport, SplitError> {
    state.grid.check_cfl(dt)?;
    let weights = CostWeights::for_dimension(problem.n_state());
    let t_start = state.step as f64 * dt;
    let t_end = (state.step + 1) as f64 * dt;
    state.grid.diffuse(0.5 * dt);

    let n = state.grid.n_cells();
    let mut report = SplitStepReport {
        choices: Vec::with_capacity(n),
        stats: Vec::with_capacity(n),
        work: Vec::with_capacity(n),
        fallbacks: 0,
    };
    let mut chem_start = Vec::with_capacity(n);
    for (i, cell) in state.grid.cells.iter_mut().enumerate() {
        cell.t = t_start;
        let action = match chooser {
            Chooser::Fixed(a) => a,
            Chooser::Policy(ck) => {
                let obs = observe(problem, cell, &state.prev[i], dt, &ck.norm);
                let out = ck.params.forward(&obs.features)?;
                Action::from_index(greedy(&out.logits)).expect("two logits")
            }
        };
        let w = advance_window(problem, cell, t_end, action, config)
            .and_then(|w| w.into_result(t_start, t_end))
            .map_err(|source| SplitError::Chemistry { cell: i, source })?;
        chem_start.push(std::mem::replace(cell, w.state));
        report.choices.push(action);
        report.work.push(w.stats.work_units(&weights));
        report.stats.push(w.stats);
        report.fallbacks += w.fallback as usize;
    }
    state.prev = chem_start;
    state.grid.diffuse(0.5 * dt);
    state.step += 1;
    Ok(report)
}

/// Space-time record of a split run. Row `k` of the matrices is the field
/// after step `k` (row 0 is the initial field); choices and work have one row
/// per step.
#[derive(Debug, Clone)]
pub struct Run1D {
    pub x: Vec<f64>,
    pub times: Vec<f64>,
    pub temperature: Vec<Vec<f64>>,
    /// `[species][time][cell]` for the problem's key species.
    pub key_species: Vec<Vec<Vec<f64>>>,
    pub choices: Vec<Vec<Action>>,
    pub work: Vec<Vec<f64>>,
    pub total_work: f64,
    pub fallbacks: usize,
}

pub fn run_split(
    grid: Grid1D,
    problem: &dyn OdeProblem,
    chooser: Chooser<'_>,
    config: &EnvConfig,
    dt: f64,
    n_steps: usize,
) -> Result<Run1D, SplitError> {
    grid.check_cfl(dt)?;
    let keys = problem.observables().key_species.clone();
    let mut state = SplitState::new(grid);
    let snapshot = |g: &Grid1D| -> (Vec<f64>, Vec<Vec<f64>>) {
        let t = g.cells.iter().map(|c| c.temp).collect();
        let y = keys.iter().map(|&k| g.cells.iter().map(|c| c.y[k]).collect()).collect();
        (t, y)
    };
    let (t0, y0) = snapshot(&state.grid);
    let mut run = Run1D {
        x: state.grid.centers(),
        times: vec![0.0],
        temperature: vec![t0],
        key_species: y0.into_iter().map(|row| vec![row]).collect(),
        choices: Vec::with_capacity(n_steps),
        work: Vec::with_capacity(n_steps),
        total_work: 0.0,
        fallbacks: 0,
    };
    for _ in 0..n_steps {
        let rep = split_step(&mut state, problem, chooser, config, dt)?;
        run.total_work += rep.work.iter().sum::<f64>();
        run.fallbacks += rep.fallbacks;
        run.choices.push(rep.choices);
        run.work.push(rep.work);
        run.times.push(state.step as f64 * dt);
        let (t, y) = snapshot(&state.grid);
        run.temperature.push(t);
        for (dst, row) in run.key_species.iter_mut().zip(y) {
            dst.push(row);
        }
    }
    Ok(run)
}

impl Run1D {
    pub fn bdf_usage_fraction(&self) -> f64 {
        let total: usize = self.choices.iter().map(Vec::len).sum();
        let bdf = self.choices.iter().flatten().filter(|&&a| a == Action::Bdf).count();
        bdf as f64 / total.max(1) as f64
    }

    /// Space-time RMSE of the temperature against `reference` (same grid and
    /// steps), excluding the shared initial field.
    pub fn temperature_rmse(&self, reference: &Run1D) -> f64 {
        let mut sq = 0.0;
        let mut count = 0usize;
        for (a, b) in self.temperature[1..].iter().zip(&reference.temperature[1..]) {
            for (x, y) in a.iter().zip(b) {
                sq += (x - y).powi(2);
                count += 1;
            }
        }
        (sq / count.max(1) as f64).sqrt()
    }

    /// Writes `temperature.csv`, `choices.csv` (1 = BDF), `work.csv` and one
    /// `species_<name>.csv` per key species into `dir`.
    pub fn write_csvs(&self, dir: &Path, species_names: &[String]) -> Result<(), SplitError> {
        fs::create_dir_all(dir)?;
        let header: Vec<String> =
            std::iter::once("t".to_string()).chain(self.x.iter().map(|x| format!("x={x}"))).collect();
        let write = |name: &str, rows: &[Vec<f64>], times: &[f64]| -> Result<(), SplitError> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(&header)?;
            for (t, row) in times.iter().zip(rows) {
                w.write_record(std::iter::once(t.to_string()).chain(row.iter().map(f64::to_string)))?;
            }
            w.flush()?;
            Ok(())
        };
        write("temperature.csv", &self.temperature, &self.times)?;
        for (name, field) in species_names.iter().zip(&self.key_species) {
            write(&format!("species_{name}.csv"), field, &self.times)?;
        }
        let choice_rows: Vec<Vec<f64>> = self
            .choices
            .iter()
            .map(|row| row.iter().map(|&a| if a == Action::Bdf { 1.0 } else { 0.0 }).collect())
            .collect();
        write("choices.csv", &choice_rows, &self.times[1..])?;
        write("work.csv", &self.work, &self.times[1..])?;
        Ok(())
    }
}

/// Hot-spot ignition case: a quiescent mixture with a Gaussian temperature
/// bump in the middle of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Demo1dConfig {
    pub n_cells: usize,
    pub length: f64,
    pub kappa: f64,
    /// Split step; the decision spacing of the environment when unset.
    pub dt_split: Option<f64>,
    pub n_steps: usize,
    pub background: Condition,
    pub hot_temperature: f64,
    /// Gaussian half-width as a fraction of the domain length.
    pub hot_width: f64,
}

impl Default for Demo1dConfig {
    fn default() -> Self {
        Self {
            n_cells: 64,
            length: 0.01,
            kappa: 2e-5,
            dt_split: None,
            n_steps: 600,
            background: Condition { temperature: 950.0, pressure: 1.0, fuel: 0.05 },
            hot_temperature: 1150.0,
            hot_width: 0.05,
        }
    }
}

impl Demo1dConfig {
    pub fn dt(&self, env: &EnvConfig) -> f64 {
        self.dt_split.unwrap_or(env.reference.dt_dec)
    }

    /// Initial grid; the ends are held at the background state.
    pub fn initial_grid(&self, spec: &ProblemSpec) -> Result<Grid1D, SplitError> {
        if self.n_cells < 3 || !(self.length > 0.0) {
            return Err(SplitError::Config("need n_cells >= 3 and length > 0".into()));
        }
        let dx = self.length / self.n_cells as f64;
        let bg = spec.initial_state(&self.background);
        let cells = (0..self.n_cells)
            .map(|i| {
                let x = (i as f64 + 0.5) * dx / self.length - 0.5;
                let bump = (-(x / self.hot_width).powi(2)).exp();
                let mut s = bg.clone();
                s.temp += (self.hot_temperature - self.background.temperature) * bump;
                s
            })
            .collect();
        Grid1D::new(cells, dx, self.kappa, bg.clone(), bg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Demo1dReport {
    pub n_cells: usize,
    pub n_steps: usize,
    pub dt_split: f64,
    pub diffusion_number: f64,
    pub work_bdf: f64,
    pub work_policy: f64,
    pub work_qss: f64,
    pub speedup: f64,
    pub speedup_qss: f64,
    pub temperature_rmse: f64,
    pub temperature_rmse_qss: f64,
    pub bdf_usage_fraction: f64,
    pub fallbacks: usize,
}

/// Runs the hot-spot case with the policy, always-BDF and always-QSS chemistry.
/// The always-BDF run is the error reference.
pub fn run_1d_case(
    spec: &ProblemSpec,
    demo: &Demo1dConfig,
    env: &EnvConfig,
    checkpoint: &Checkpoint,
) -> Result<(Demo1dReport, Run1D, Run1D), SplitError> {
    let problem = spec
        .instantiate(&demo.background)
        .map_err(|e| SplitError::Config(e.to_string()))?;
    let grid = demo.initial_grid(spec)?;
    let dt = demo.dt(env);
    let bdf = run_split(grid.clone(), problem.as_ref(), Chooser::Fixed(Action::Bdf), env, dt, demo.n_steps)?;
    let qss = run_split(grid.clone(), problem.as_ref(), Chooser::Fixed(Action::Qss), env, dt, demo.n_steps)?;
    let rl = run_split(grid.clone(), problem.as_ref(), Chooser::Policy(checkpoint), env, dt, demo.n_steps)?;
    let report = Demo1dReport {
        n_cells: demo.n_cells,
        n_steps: demo.n_steps,
        dt_split: dt,
        diffusion_number: grid.diffusion_number(dt),
        work_bdf: bdf.total_work,
        work_policy: rl.total_work,
        work_qss: qss.total_work,
        speedup: bdf.total_work / rl.total_work,
        speedup_qss: bdf.total_work / qss.total_work,
        temperature_rmse: rl.temperature_rmse(&bdf),
        temperature_rmse_qss: qss.temperature_rmse(&bdf),
        bdf_usage_fraction: rl.bdf_usage_fraction(),
        fallbacks: rl.fallbacks,
    };
    Ok((report, rl, bdf))
}
