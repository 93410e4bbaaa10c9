//! PPO with a clipped surrogate, GAE, Adam, and projected dual ascent on the
//! constraint multiplier.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Env, EnvConfig, EnvError, FeatureNorm, PoolEntry};
use crate::policy::{entropy, log_softmax, sample_and_logprob, softmax, Checkpoint, PolicyError, PolicyParams};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("training diverged at rollout {rollout}: {reason}")]
    Diverged { rollout: usize, reason: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub n_rollout: usize,
    pub minibatch: usize,
    pub n_epochs: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Upper bound; training runs whole rollouts only.
    pub total_steps: usize,
    pub hidden: [usize; 2],
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            n_rollout: 2048,
            minibatch: 64,
            n_epochs: 4,
            learning_rate: 3e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            total_steps: 100_000,
            hidden: [128, 128],
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if self.n_rollout == 0 || self.minibatch == 0 || self.n_epochs == 0 || self.total_steps == 0 {
            return bad("rollout, minibatch, epoch and step counts must be positive");
        }
        if self.total_steps < self.n_rollout {
            return bad("total_steps must cover at least one rollout");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("need gamma in (0, 1] and gae_lambda in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.clip > 0.0) {
            return bad("learning_rate and clip must be > 0");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualConfig {
    pub lambda_init: f64,
    pub eta: f64,
    pub delta: f64,
    pub lambda_max: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self { lambda_init: 1.0, eta: 1e-3, delta: 1e-4, lambda_max: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub eta: f64,
    pub delta: f64,
    pub lambda_max: f64,
}

impl DualState {
    pub fn new(cfg: &DualConfig) -> Self {
        Self {
            lambda: cfg.lambda_init.clamp(0.0, cfg.lambda_max),
            eta: cfg.eta,
            delta: cfg.delta,
            lambda_max: cfg.lambda_max,
        }
    }
}

/// `lambda <- clip(lambda + eta (nu_bar - delta), 0, lambda_max)`.
pub fn dual_update(dual: DualState, mean_violation: f64) -> DualState {
    let lambda = (dual.lambda + dual.eta * (mean_violation - dual.delta)).clamp(0.0, dual.lambda_max);
    DualState { lambda, ..dual }
}

/// Generalized advantage estimates and returns (`A + V`), not normalized.
///
/// `dones[k]` marks that the episode ended with step `k`; `bootstrap_value`
/// is used only when the last step is not terminal.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(PpoError::Shape(format!(
            "rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for k in (0..n).rev() {
        let not_done = if dones[k] { 0.0 } else { 1.0 };
        let next_v = if k + 1 < n { values[k + 1] } else { bootstrap_value };
        let delta = rewards[k] + gamma * next_v * not_done - values[k];
        running = delta + gamma * lambda * not_done * running;
        adv[k] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Standardizes to zero mean and unit variance in place.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Clipped surrogate `min(rho A, clip(rho) A)` and its derivative in `rho`.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One descent step on `theta` along `grad`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in theta.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Transitions of one rollout, all collected under the same multiplier.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub logp_old: Vec<f64>,
    pub values_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub cost_norm: Vec<f64>,
    pub errors: Vec<f64>,
    /// Violations as charged in the reward.
    pub violations: Vec<f64>,
    pub dones: Vec<bool>,
    pub lambdas: Vec<f64>,
    /// Value of the state after the last step, if that step was not terminal.
    pub bootstrap_value: f64,
    pub episodes_completed: usize,
    pub fallbacks: usize,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Appends `other` after this buffer. Its bootstrap value replaces ours, so
    /// a non-terminal tail here would be bootstrapped from the wrong state;
    /// callers mark such segment ends as truncated first.
    fn append(&mut self, mut other: RolloutBuffer) {
        self.obs.append(&mut other.obs);
        self.actions.append(&mut other.actions);
        self.logp_old.append(&mut other.logp_old);
        self.values_old.append(&mut other.values_old);
        self.rewards.append(&mut other.rewards);
        self.cost_norm.append(&mut other.cost_norm);
        self.errors.append(&mut other.errors);
        self.violations.append(&mut other.violations);
        self.dones.append(&mut other.dones);
        self.lambdas.append(&mut other.lambdas);
        self.bootstrap_value = other.bootstrap_value;
        self.episodes_completed += other.episodes_completed;
        self.fallbacks += other.fallbacks;
    }

    pub fn mean_violation(&self) -> f64 {
        mean(&self.violations)
    }

    /// Rewards in one buffer must all use the same multiplier.
    pub fn check_stationary(&self) -> Result<f64, PpoError> {
        let first = *self.lambdas.first().ok_or_else(|| PpoError::Shape("empty rollout".into()))?;
        if self.lambdas.iter().any(|&l| l.to_bits() != first.to_bits()) {
            return Err(PpoError::Shape("rollout mixes multiplier values".into()));
        }
        Ok(first)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct MinibatchStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Loss terms and the gradient of
/// `policy_loss + value_coef * value_loss - entropy_coef * entropy`
/// averaged over the samples in `idx`.
pub fn minibatch_gradient(
    params: &PolicyParams,
    buf: &RolloutBuffer,
    adv: &[f64],
    returns: &[f64],
    idx: &[usize],
    cfg: &PpoConfig,
) -> Result<(MinibatchStats, Vec<f64>), PpoError> {
    let mut grad = vec![0.0; params.n_params()];
    let mut s = MinibatchStats::default();
    let inv = 1.0 / idx.len() as f64;
    for &i in idx {
        let out = params.forward(&buf.obs[i])?;
        let a = buf.actions[i];
        let lp = log_softmax(&out.logits);
        let p = softmax(&out.logits);
        let h = entropy(&out.logits);
        let ratio = (lp[a] - buf.logp_old[i]).exp();
        let (surr, dsurr) = clipped_surrogate(ratio, adv[i], cfg.clip);
        if (ratio - 1.0).abs() > cfg.clip {
            s.clip_fraction += inv;
        }
        s.policy_loss -= surr * inv;
        s.value_loss += (out.value - returns[i]).powi(2) * inv;
        s.entropy += h * inv;
        s.approx_kl += (buf.logp_old[i] - lp[a]) * inv;

        // d(-surr)/dlogp = -dsurr * ratio, and dlogp_a/dz_j = 1[j = a] - p_j
        let g_logp = -dsurr * ratio * inv;
        let mut dlogits = [0.0; 2];
        for j in 0..2 {
            let onehot = if j == a { 1.0 } else { 0.0 };
            let log_pj = if p[j] > 0.0 { lp[j] } else { 0.0 };
            // dH/dz_j = -p_j (log p_j + H)
            dlogits[j] = g_logp * (onehot - p[j]) + cfg.entropy_coef * inv * p[j] * (log_pj + h);
        }
        let dvalue = cfg.value_coef * 2.0 * (out.value - returns[i]) * inv;
        params.backward(&out.cache, &dlogits, dvalue, &mut grad)?;
    }
    Ok((s, grad))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct UpdateStats {
    /// Averages over every minibatch of every epoch.
    pub mean: MinibatchStats,
    /// The first minibatch of the first epoch, before any parameter change.
    pub first: MinibatchStats,
    pub hyper: PpoConfig,
}

/// Runs the clipped-surrogate epochs over a finished rollout. Advantages are
/// normalized here.
pub fn ppo_update<R: Rng + ?Sized>(
    params: &mut PolicyParams,
    adam: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    let (mut adv, returns) = compute_gae(&buf.rewards, &buf.values_old, &buf.dones, buf.bootstrap_value, cfg.gamma, cfg.gae_lambda)?;
    normalize_advantages(&mut adv);
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mut acc = MinibatchStats::default();
    let mut first = None;
    let mut count = 0usize;
    for _ in 0..cfg.n_epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch) {
            let (s, grad) = minibatch_gradient(params, buf, &adv, &returns, idx, cfg)?;
            let total = s.policy_loss + cfg.value_coef * s.value_loss - cfg.entropy_coef * s.entropy;
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PpoError::Diverged { rollout: 0, reason: format!("non-finite loss {total}") });
            }
            first.get_or_insert(s);
            acc.policy_loss += s.policy_loss;
            acc.value_loss += s.value_loss;
            acc.entropy += s.entropy;
            acc.approx_kl += s.approx_kl;
            acc.clip_fraction += s.clip_fraction;
            count += 1;
            adam.step(params.theta_mut(), &grad, cfg.learning_rate);
        }
    }
    let c = count.max(1) as f64;
    let mean = MinibatchStats {
        policy_loss: acc.policy_loss / c,
        value_loss: acc.value_loss / c,
        entropy: acc.entropy / c,
        approx_kl: acc.approx_kl / c,
        clip_fraction: acc.clip_fraction / c,
    };
    Ok(UpdateStats { mean, first: first.unwrap_or_default(), hyper: *cfg })
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub dual: DualConfig,
    pub seed: u64,
    pub workers: usize,
    /// Save a checkpoint every this many rollouts (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { ppo: PpoConfig::default(), dual: DualConfig::default(), seed: 0, workers: 1, checkpoint_every: 10 }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub rollout: usize,
    pub env_steps: usize,
    pub mean_reward: f64,
    pub mean_cost_norm: f64,
    pub mean_error: f64,
    pub mean_violation: f64,
    /// Multiplier the rollout was collected with.
    pub lambda: f64,
    /// Multiplier after the dual update.
    pub lambda_next: f64,
    pub qss_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub episodes_completed: usize,
    pub fallbacks: usize,
}

impl TrainLogRow {
    fn is_finite(&self) -> bool {
        [
            self.mean_reward,
            self.mean_cost_norm,
            self.mean_error,
            self.mean_violation,
            self.lambda_next,
            self.policy_loss,
            self.value_loss,
            self.entropy,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Everything the loop needs besides the configuration.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub pool: Vec<PoolEntry>,
    pub env: EnvConfig,
    pub norm: FeatureNorm,
    pub problem_id: String,
    /// Checkpoints and the log go here when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

/// One rollout worker: its own RNG and the episode it is in the middle of.
struct Worker {
    rng: ChaCha8Rng,
    env: Option<Env>,
}

impl Worker {
    fn collect(
        &mut self,
        pool: &[PoolEntry],
        env_cfg: &EnvConfig,
        norm: &Arc<FeatureNorm>,
        params: &PolicyParams,
        lambda: f64,
        n_steps: usize,
    ) -> Result<RolloutBuffer, PpoError> {
        let mut buf = RolloutBuffer::default();
        while buf.len() < n_steps {
            if self.env.is_none() {
                let entry = &pool[self.rng.gen_range(0..pool.len())];
                let mut env = Env::new(entry.problem.clone(), entry.reference.clone(), *env_cfg, norm.clone())?;
                env.reset();
                self.env = Some(env);
            }
            let env = self.env.as_mut().expect("episode is live");
            let obs = env.observation();
            let out = params.forward(&obs.features)?;
            let (a, logp, _) = sample_and_logprob(&out.logits, &mut self.rng);
            let tr = env.step(Action::from_index(a)?, lambda)?;
            buf.obs.push(obs.features);
            buf.actions.push(a);
            buf.logp_old.push(logp);
            buf.values_old.push(out.value);
            buf.rewards.push(tr.reward);
            buf.cost_norm.push(tr.cost_norm);
            buf.errors.push(tr.error);
            buf.violations.push(tr.penalty);
            buf.dones.push(tr.done);
            buf.lambdas.push(lambda);
            buf.fallbacks += tr.info.fallback as usize;
            if tr.done {
                buf.episodes_completed += 1;
                self.env = None;
            }
        }
        buf.bootstrap_value = match &self.env {
            Some(env) => params.forward(&env.observation().features)?.value,
            None => 0.0,
        };
        Ok(buf)
    }
}

/// Merges worker segments. A segment that stops mid-episode is bootstrapped by
/// folding its tail value into the last reward and marking it terminal.
fn merge_segments(mut segments: Vec<RolloutBuffer>, gamma: f64) -> RolloutBuffer {
    let last = segments.pop().expect("at least one worker");
    let mut out = RolloutBuffer::default();
    for mut seg in segments {
        if let (Some(d), Some(r)) = (seg.dones.last_mut(), seg.rewards.last_mut()) {
            if !*d {
                *r += gamma * seg.bootstrap_value;
                *d = true;
            }
        }
        out.append(seg);
    }
    out.append(last);
    out
}

const LOG_FILE: &str = "train_log.csv";

/// Trains a policy from scratch on the condition pool.
pub fn train(cfg: &TrainConfig, setup: &TrainSetup) -> Result<TrainOutcome, PpoError> {
    cfg.ppo.validate()?;
    setup.env.validate()?;
    if setup.pool.is_empty() {
        return Err(PpoError::Config("empty condition pool".into()));
    }
    if cfg.workers == 0 {
        return Err(PpoError::Config("need at least one worker".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = PolicyParams::init(setup.norm.dim(), cfg.ppo.hidden, &mut rng);
    let mut adam = Adam::new(params.n_params(), cfg.ppo.adam_beta1, cfg.ppo.adam_beta2, cfg.ppo.adam_eps);
    let mut dual = DualState::new(&cfg.dual);
    let norm = Arc::new(setup.norm.clone());
    let mut workers: Vec<Worker> = (0..cfg.workers)
        .map(|w| Worker { rng: ChaCha8Rng::seed_from_u64(rng.gen::<u64>() ^ w as u64), env: None })
        .collect();

    let mut writer = match &setup.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join(LOG_FILE))?)
        }
        None => None,
    };
    let checkpoint = |params: &PolicyParams, lambda: f64, steps: usize, name: &str| -> Result<Checkpoint, PpoError> {
        let ck = Checkpoint::new(params.clone(), setup.norm.clone(), lambda, steps as u64, &setup.problem_id);
        if let Some(dir) = &setup.out_dir {
            ck.save(&dir.join(name))?;
        }
        Ok(ck)
    };

    // whole rollouts only, so total_steps is never exceeded
    let n_rollouts = cfg.ppo.total_steps / cfg.ppo.n_rollout;
    let mut log = Vec::with_capacity(n_rollouts);
    let mut env_steps = 0usize;
    for rollout in 0..n_rollouts {
        let per_worker = cfg.ppo.n_rollout.div_ceil(cfg.workers);
        let lambda = dual.lambda;
        let segments: Vec<Result<RolloutBuffer, PpoError>> = if cfg.workers == 1 {
            vec![workers[0].collect(&setup.pool, &setup.env, &norm, &params, lambda, cfg.ppo.n_rollout)]
        } else {
            let snapshot = &params;
            std::thread::scope(|s| {
                let handles: Vec<_> = workers
                    .iter_mut()
                    .map(|w| {
                        let norm = norm.clone();
                        s.spawn(move || w.collect(&setup.pool, &setup.env, &norm, snapshot, lambda, per_worker))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
            })
        };
        let buf = merge_segments(segments.into_iter().collect::<Result<_, _>>()?, cfg.ppo.gamma);
        buf.check_stationary()?;
        env_steps += buf.len();

        let stats = match ppo_update(&mut params, &mut adam, &buf, &cfg.ppo, &mut rng) {
            Ok(s) => s,
            Err(PpoError::Diverged { reason, .. }) => {
                checkpoint(&params, dual.lambda, env_steps, "checkpoint_diverged.json")?;
                return Err(PpoError::Diverged { rollout, reason });
            }
            Err(e) => return Err(e),
        };
        let nu_bar = buf.mean_violation();
        dual = dual_update(dual, nu_bar);

        let row = TrainLogRow {
            rollout,
            env_steps,
            mean_reward: mean(&buf.rewards),
            mean_cost_norm: mean(&buf.cost_norm),
            mean_error: mean(&buf.errors),
            mean_violation: nu_bar,
            lambda,
            lambda_next: dual.lambda,
            qss_fraction: buf.actions.iter().filter(|&&a| a == Action::Qss.index()).count() as f64 / buf.len() as f64,
            policy_loss: stats.mean.policy_loss,
            value_loss: stats.mean.value_loss,
            entropy: stats.mean.entropy,
            approx_kl: stats.mean.approx_kl,
            clip_fraction: stats.mean.clip_fraction,
            episodes_completed: buf.episodes_completed,
            fallbacks: buf.fallbacks,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(row)?;
            w.flush()?;
        }
        log.push(row);
        if !row.is_finite() || !params.is_finite() {
            checkpoint(&params, dual.lambda, env_steps, "checkpoint_diverged.json")?;
            return Err(PpoError::Diverged { rollout, reason: "non-finite training statistics".into() });
        }
        if cfg.checkpoint_every > 0 && (rollout + 1) % cfg.checkpoint_every == 0 {
            checkpoint(&params, dual.lambda, env_steps, &format!("checkpoint_{:05}.json", rollout + 1))?;
        }
    }
    let final_ck = checkpoint(&params, dual.lambda, env_steps, "checkpoint_final.json")?;
    Ok(TrainOutcome { checkpoint: final_ck, log })
}

/// Path of the final checkpoint written by [`train`] into `dir`.
pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint_final.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_two_step_example() {
        let (adv, ret) = compute_gae(&[1.0, 1.0], &[0.5, 0.5], &[false, false], 0.5, 0.99, 0.95).unwrap();
        assert!((adv[1] - 0.995).abs() < 1e-12);
        // 0.995 * (1 + 0.99 * 0.95)
        assert!((adv[0] - 1.9307975).abs() < 1e-12);
        assert!((ret[0] - 2.4307975).abs() < 1e-12);
    }

    #[test]
    fn gae_zero_lambda_is_td() {
        let r = [0.3, -1.0, 2.0, 0.5];
        let v = [0.1, 0.2, -0.4, 1.0];
        let d = [false, true, false, false];
        let (adv, _) = compute_gae(&r, &v, &d, 0.7, 0.9, 0.0).unwrap();
        let expect = [0.3 + 0.9 * 0.2 - 0.1, -1.0 - 0.2, 2.0 + 0.9 * 1.0 + 0.4, 0.5 + 0.9 * 0.7 - 1.0];
        for (a, e) in adv.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!(compute_gae(&r, &v[..3], &d, 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), (1.2, 0.0));
        assert_eq!(clipped_surrogate(0.5, 1.0, 0.2), (0.5, 1.0));
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), (-0.8, 0.0));
        assert_eq!(clipped_surrogate(1.5, -1.0, 0.2), (-1.5, -1.0));
    }

    #[test]
    fn dual_examples() {
        let d = DualState::new(&DualConfig::default());
        assert!((dual_update(d, 0.05).lambda - 1.0000499).abs() < 1e-15);
        assert_eq!(dual_update(d, 1e-4).lambda, 1.0);
        let top = DualState { lambda: 100.0, ..d };
        assert_eq!(dual_update(top, 1e9).lambda, 100.0);
        let bottom = DualState { lambda: 0.0, ..d };
        assert_eq!(dual_update(bottom, 0.0).lambda, 0.0);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut theta = vec![1.0, -2.0, 3.5];
        let before = theta.clone();
        let mut adam = Adam::new(3, 0.9, 0.999, 1e-8);
        adam.step(&mut theta, &[0.0; 3], 3e-4);
        assert_eq!(theta, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut theta = vec![0.0, 0.0];
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-8);
        adam.step(&mut theta, &[5.0, -0.1], 1e-3);
        assert!((theta[0] + 1e-3).abs() < 1e-9 && (theta[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn defaults_echo_hyperparameters() {
        let c = PpoConfig::default();
        assert_eq!((c.n_rollout, c.minibatch, c.n_epochs), (2048, 64, 4));
        assert_eq!((c.learning_rate, c.gamma, c.gae_lambda, c.clip), (3e-4, 0.99, 0.95, 0.2));
        assert_eq!((c.entropy_coef, c.value_coef), (0.01, 0.5));
    }
}
