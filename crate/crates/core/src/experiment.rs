//! Run configuration and the glue between references, training, evaluation
//! and the 1D demo.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{feature_dim, sample_initial_condition, warmup_features, EnvConfig, EnvError, FeatureNorm, ParamRange, PoolEntry, SamplingSpec};
use crate::env::write_transitions_csv;
use crate::eval::{run_policy_episode, sweep, write_choices_csv, write_sweep_csv, EpisodeReport, EvalError, Mode, SweepCase, SweepSummary};
use crate::kinetics::{Condition, KineticsError, ProblemSpec};
use crate::policy::{Checkpoint, PolicyError};
use crate::ppo::{train, PpoError, TrainConfig, TrainOutcome, TrainSetup};
use crate::reference::{generate_for, ReferenceError, ReferenceKey, ReferenceTrajectory};
use crate::splitting1d::{run_1d_case, Demo1dConfig, Demo1dReport, SplitError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing reference {path}; run the `reference` subcommand first")]
    MissingReference { path: PathBuf },
    #[error("{failed} of {total} reference generations failed; first: {first}")]
    ReferencesFailed { failed: usize, total: usize, first: String },
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RunError {
    /// 1 usage or config, 2 numerical failure, 3 missing prerequisite.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::MissingReference { .. } => 3,
            RunError::Ppo(PpoError::Diverged { .. })
            | RunError::ReferencesFailed { .. }
            | RunError::Reference(ReferenceError::GenerationFailed { .. })
            | RunError::Env(EnvError::SolverFailure { .. })
            | RunError::Ppo(PpoError::Env(EnvError::SolverFailure { .. }))
            | RunError::Split(SplitError::Chemistry { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub size: usize,
    pub seed: u64,
    pub sampling: SamplingSpec,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { size: 32, seed: 1, sampling: SamplingSpec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    pub warmup_states: usize,
    /// Winsorizing quantile applied to each feature before the moments.
    pub quantile: f64,
    pub clip: f64,
    /// Warmup episodes stop at the first window with a larger error.
    pub max_error: Option<f64>,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self { warmup_states: 4096, quantile: 0.005, clip: 10.0, max_error: Some(1.0) }
    }
}

/// Held-out (temperature, pressure) grid at a fixed fuel fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalGridConfig {
    pub temperature: ParamRange,
    pub pressure: ParamRange,
    pub fuel: f64,
    pub n_temperature: usize,
    pub n_pressure: usize,
}

impl Default for EvalGridConfig {
    fn default() -> Self {
        Self {
            temperature: ParamRange::uniform(300.0, 1200.0),
            pressure: ParamRange::log_uniform(1.0, 60.0),
            fuel: 0.05,
            n_temperature: 5,
            n_pressure: 5,
        }
    }
}

impl EvalGridConfig {
    pub fn conditions(&self) -> Vec<Condition> {
        let ts = self.temperature.grid(self.n_temperature);
        let ps = self.pressure.grid(self.n_pressure);
        ts.iter()
            .flat_map(|&temperature| ps.iter().map(move |&pressure| Condition { temperature, pressure, fuel: self.fuel }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub reference_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { reference_dir: "references".into(), output_dir: "runs/default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub env: EnvConfig,
    pub pool: PoolConfig,
    pub normalization: NormConfig,
    pub train: TrainConfig,
    pub eval: EvalGridConfig,
    pub demo1d: Demo1dConfig,
    pub paths: Paths,
}

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, RunError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.env.validate()?;
        self.pool.sampling.validate()?;
        self.train.ppo.validate()?;
        self.problem.instantiate(&Condition::nominal())?;
        if self.pool.size == 0 {
            return Err(RunError::Config("pool.size must be >= 1".into()));
        }
        if self.train.workers == 0 {
            return Err(RunError::Config("train.workers must be >= 1".into()));
        }
        if self.eval.n_temperature == 0 || self.eval.n_pressure == 0 {
            return Err(RunError::Config("eval grid needs at least one point per axis".into()));
        }
        if !(0.0..0.5).contains(&self.normalization.quantile) || !(self.normalization.clip > 0.0) {
            return Err(RunError::Config("normalization needs quantile in [0, 0.5) and clip > 0".into()));
        }
        Ok(())
    }

    /// Writes the fully resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, RunError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn pool_conditions(&self) -> Result<Vec<Condition>, RunError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.pool.seed);
        (0..self.pool.size)
            .map(|_| sample_initial_condition(&mut rng, &self.pool.sampling).map_err(RunError::from))
            .collect()
    }

    pub fn key(&self, condition: Condition) -> ReferenceKey {
        ReferenceKey { problem: self.problem.clone(), condition, settings: self.env.reference }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub condition: Condition,
    pub file: String,
    pub params_hash: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ReferenceReport {
    pub generated: usize,
    pub reused: usize,
    /// Conditions whose generation failed, with the reason.
    pub failed: Vec<(Condition, String)>,
    pub manifest: Vec<ManifestEntry>,
}

impl ReferenceReport {
    /// `Err` when any condition failed.
    pub fn check(&self) -> Result<(), RunError> {
        match self.failed.first() {
            Some((c, msg)) => Err(RunError::ReferencesFailed {
                failed: self.failed.len(),
                total: self.failed.len() + self.manifest.len(),
                first: format!("T={} p={} fuel={}: {msg}", c.temperature, c.pressure, c.fuel),
            }),
            None => Ok(()),
        }
    }
}

fn ensure_one(key: &ReferenceKey, dir: &Path) -> Result<bool, ReferenceError> {
    let path = dir.join(key.file_name());
    if path.exists() && ReferenceTrajectory::load(&path, Some(&key.params_hash())).is_ok() {
        return Ok(false);
    }
    generate_for(key)?.save(&path)?;
    Ok(true)
}

/// Makes sure a valid reference file exists for every pool and evaluation
/// condition. Files with a matching hash and checksum are kept; missing or
/// damaged ones are regenerated.
pub fn ensure_references(cfg: &RunConfig, workers: usize) -> Result<ReferenceReport, RunError> {
    let dir = &cfg.paths.reference_dir;
    fs::create_dir_all(dir)?;
    let mut conditions = cfg.pool_conditions()?;
    for c in cfg.eval.conditions() {
        if !conditions.contains(&c) {
            conditions.push(c);
        }
    }
    let keys: Vec<ReferenceKey> = conditions.iter().map(|c| cfg.key(*c)).collect();
    let results: Vec<Result<bool, ReferenceError>> = if workers <= 1 {
        keys.iter().map(|k| ensure_one(k, dir)).collect()
    } else {
        let chunk = keys.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = keys
                .chunks(chunk.max(1))
                .map(|ks| s.spawn(move || ks.iter().map(|k| ensure_one(k, dir)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("reference worker panicked")).collect()
        })
    };
    let mut report = ReferenceReport::default();
    for (key, res) in keys.iter().zip(results) {
        match res {
            Ok(generated) => {
                if generated {
                    report.generated += 1;
                } else {
                    report.reused += 1;
                }
                report.manifest.push(ManifestEntry {
                    condition: key.condition,
                    file: key.file_name(),
                    params_hash: key.params_hash(),
                });
            }
            Err(e) => report.failed.push((key.condition, e.to_string())),
        }
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&report.manifest)?)?;
    Ok(report)
}

/// Loads the stored reference for `condition`, failing with
/// [`RunError::MissingReference`] when it is absent.
pub fn load_reference(cfg: &RunConfig, condition: Condition) -> Result<ReferenceTrajectory, RunError> {
    let key = cfg.key(condition);
    let path = cfg.paths.reference_dir.join(key.file_name());
    if !path.exists() {
        return Err(RunError::MissingReference { path });
    }
    Ok(ReferenceTrajectory::load(&path, Some(&key.params_hash()))?)
}

fn entry(cfg: &RunConfig, condition: Condition) -> Result<PoolEntry, RunError> {
    Ok(PoolEntry {
        problem: cfg.problem.instantiate(&condition)?,
        reference: Arc::new(load_reference(cfg, condition)?),
    })
}

pub fn load_pool(cfg: &RunConfig) -> Result<Vec<PoolEntry>, RunError> {
    cfg.pool_conditions()?.into_iter().map(|c| entry(cfg, c)).collect()
}

pub fn eval_cases(cfg: &RunConfig) -> Result<Vec<SweepCase>, RunError> {
    cfg.eval
        .conditions()
        .into_iter()
        .map(|c| entry(cfg, c).map(|e| SweepCase { problem: e.problem, reference: e.reference }))
        .collect()
}

/// Feature statistics from random-policy warmup episodes on the pool.
pub fn fit_normalization(cfg: &RunConfig, pool: &[PoolEntry]) -> Result<FeatureNorm, RunError> {
    let n_key = pool
        .first()
        .ok_or_else(|| RunError::Config("empty pool".into()))?
        .problem
        .observables()
        .key_species
        .len();
    if cfg.normalization.warmup_states == 0 {
        return Ok(FeatureNorm::identity(feature_dim(n_key)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(0x9e37_79b9));
    let samples = warmup_features(pool, &cfg.env, cfg.normalization.warmup_states, cfg.normalization.max_error, &mut rng)?;
    Ok(FeatureNorm::fit(&samples, n_key, cfg.normalization.quantile, cfg.normalization.clip)?)
}

/// Loads the pool, fits the normalization and trains. Outputs go to `out_dir`
/// when given.
pub fn run_training(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, RunError> {
    let pool = load_pool(cfg)?;
    let norm = fit_normalization(cfg, &pool)?;
    if let Some(dir) = out_dir {
        cfg.write_resolved(dir)?;
    }
    let setup = TrainSetup {
        pool,
        env: cfg.env,
        norm,
        problem_id: cfg.problem.id().to_string(),
        out_dir: out_dir.map(Path::to_path_buf),
    };
    Ok(train(&cfg.train, &setup)?)
}

/// One greedy episode at `condition`. Writes `report.json`, `choices.csv` and
/// `transitions.csv` into `out_dir` when given.
pub fn run_eval(
    cfg: &RunConfig,
    condition: Condition,
    checkpoint: &Checkpoint,
    out_dir: Option<&Path>,
) -> Result<EpisodeReport, RunError> {
    let e = entry(cfg, condition)?;
    let (report, transitions) = run_policy_episode(e.problem, e.reference, &cfg.env, checkpoint, Mode::Greedy)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        write_choices_csv(&dir.join("choices.csv"), &report)?;
        write_transitions_csv(&dir.join("transitions.csv"), &transitions)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cases: Vec<SweepCase>,
    pub rows: Vec<Result<EpisodeReport, String>>,
    pub summary: SweepSummary,
}

pub const SWEEP_CSV_FILE: &str = "sweep.csv";

/// Greedy episodes over the evaluation grid. Writes `sweep.csv` and
/// `sweep_summary.json` into `out_dir` when given.
pub fn run_sweep(cfg: &RunConfig, checkpoint: &Checkpoint, out_dir: Option<&Path>) -> Result<SweepOutcome, RunError> {
    let cases = eval_cases(cfg)?;
    let (rows, summary) = sweep(&cases, &cfg.env, checkpoint);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_sweep_csv(&dir.join(SWEEP_CSV_FILE), &cases, &rows)?;
        fs::write(dir.join("sweep_summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(SweepOutcome { cases, rows, summary })
}

/// The hot-spot case. Writes the policy run into `out_dir`, the always-BDF
/// run into `out_dir/bdf` and `report.json` when given.
pub fn run_demo1d(cfg: &RunConfig, checkpoint: &Checkpoint, out_dir: Option<&Path>) -> Result<Demo1dReport, RunError> {
    let (report, rl, bdf) = run_1d_case(&cfg.problem, &cfg.demo1d, &cfg.env, checkpoint)?;
    if let Some(dir) = out_dir {
        let names = cfg.problem.instantiate(&cfg.demo1d.background)?.observables().key_species_names();
        rl.write_csvs(dir, &names)?;
        bdf.write_csvs(&dir.join("bdf"), &names)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}
