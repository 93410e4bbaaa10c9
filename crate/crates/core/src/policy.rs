//! Shared-encoder actor-critic MLP with hand-written forward and backward
//! passes.
//!
//! All parameters live in one flat vector. Layer `l` stores its weight matrix
//! row-major (`n_out x n_in`) followed by its bias.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::FeatureNorm;

pub const N_ACTIONS: usize = 2;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("cache was produced by different parameters")]
    StaleCache,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Linear encoder, for gradient checks against closed forms.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n_in: usize,
    pub n_out: usize,
    /// Offset of the weights in the flat parameter vector.
    pub offset: usize,
}

impl LayerShape {
    pub fn n_params(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.n_in * self.n_out
    }
}

/// Encoder `obs -> h1 -> h2`, actor head `h2 -> 2` logits, critic head `h2 -> 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub obs_dim: usize,
    pub hidden: [usize; 2],
    pub activation: Activation,
    theta: Vec<f64>,
    #[serde(skip)]
    generation: u64,
}

/// Activations kept for [`PolicyParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    /// Multiply-adds performed by the forward pass.
    pub multiply_adds: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: [f64; N_ACTIONS],
    pub value: f64,
    pub cache: ForwardCache,
}

fn dense(theta: &[f64], l: &LayerShape, x: &[f64], out: &mut [f64]) {
    let w = &theta[l.offset..l.offset + l.n_in * l.n_out];
    let b = &theta[l.bias_offset()..l.bias_offset() + l.n_out];
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(l.n_in).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Adds `dy (x)^T` and `dy` to the layer gradient and, if requested, writes
/// `W^T dy` into `dx`.
fn dense_backward(theta: &[f64], l: &LayerShape, x: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
    let gw = l.offset;
    for (o, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut grad[gw + o * l.n_in..gw + (o + 1) * l.n_in];
        for (g, v) in row.iter_mut().zip(x) {
            *g += d * v;
        }
        grad[l.bias_offset() + o] += d;
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = 0.0);
        let w = &theta[l.offset..l.offset + l.n_in * l.n_out];
        for (row, &d) in w.chunks_exact(l.n_in).zip(dy) {
            for (acc, a) in dx.iter_mut().zip(row) {
                *acc += a * d;
            }
        }
    }
}

impl PolicyParams {
    /// All-zero parameters.
    pub fn zeros(obs_dim: usize, hidden: [usize; 2], activation: Activation) -> Self {
        let mut p = Self { obs_dim, hidden, activation, theta: Vec::new(), generation: 0 };
        p.theta = vec![0.0; p.n_params()];
        p
    }

    /// Orthogonal weights (gain sqrt(2) in the encoder, 0.01 actor, 1 critic)
    /// and zero biases.
    pub fn init<R: Rng + ?Sized>(obs_dim: usize, hidden: [usize; 2], rng: &mut R) -> Self {
        let mut p = Self::zeros(obs_dim, hidden, Activation::Tanh);
        let gains = [2f64.sqrt(), 2f64.sqrt(), 0.01, 1.0];
        for (l, gain) in p.layers().iter().zip(gains) {
            let w = orthogonal_init(rng, l.n_out, l.n_in, gain);
            p.theta[l.offset..l.offset + w.len()].copy_from_slice(&w);
        }
        p
    }

    /// Parameters whose greedy action is always `action`: zero actor weights and
    /// a large bias on the chosen logit.
    pub fn forced<R: Rng + ?Sized>(obs_dim: usize, hidden: [usize; 2], action: usize, rng: &mut R) -> Self {
        let mut p = Self::init(obs_dim, hidden, rng);
        let actor = p.layers()[2];
        p.theta[actor.offset..actor.offset + actor.n_params()].iter_mut().for_each(|v| *v = 0.0);
        p.theta[actor.bias_offset() + action] = 20.0;
        p
    }

    /// `[encoder 1, encoder 2, actor, critic]`.
    pub fn layers(&self) -> [LayerShape; 4] {
        let l1 = LayerShape { n_in: self.obs_dim, n_out: self.hidden[0], offset: 0 };
        let l2 = LayerShape { n_in: self.hidden[0], n_out: self.hidden[1], offset: l1.offset + l1.n_params() };
        let actor = LayerShape { n_in: self.hidden[1], n_out: N_ACTIONS, offset: l2.offset + l2.n_params() };
        let critic = LayerShape { n_in: self.hidden[1], n_out: 1, offset: actor.offset + actor.n_params() };
        [l1, l2, actor, critic]
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(LayerShape::n_params).sum()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn theta_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.theta
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// Multiply-adds of one forward pass: `d*h1 + h1*h2 + 3*h2`.
    pub fn forward_multiply_adds(&self) -> u64 {
        self.layers().iter().map(|l| (l.n_in * l.n_out) as u64).sum()
    }

    pub fn forward(&self, obs: &[f64]) -> Result<ForwardOutput, PolicyError> {
        if obs.len() != self.obs_dim {
            return Err(PolicyError::Shape { expected: self.obs_dim, got: obs.len() });
        }
        let [l1, l2, la, lc] = self.layers();
        let mut madds = 0u64;
        let mut h1 = vec![0.0; l1.n_out];
        dense(&self.theta, &l1, obs, &mut h1);
        madds += (l1.n_in * l1.n_out) as u64;
        h1.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        let mut h2 = vec![0.0; l2.n_out];
        dense(&self.theta, &l2, &h1, &mut h2);
        madds += (l2.n_in * l2.n_out) as u64;
        h2.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        let mut logits = [0.0; N_ACTIONS];
        dense(&self.theta, &la, &h2, &mut logits);
        let mut value = [0.0];
        dense(&self.theta, &lc, &h2, &mut value);
        madds += ((la.n_out + lc.n_out) * l2.n_out) as u64;
        Ok(ForwardOutput {
            logits,
            value: value[0],
            cache: ForwardCache { generation: self.generation, x: obs.to_vec(), h1, h2, multiply_adds: madds },
        })
    }

    /// Accumulates into `grad` the gradient of a scalar loss whose adjoints
    /// with respect to the logits and the value are `dlogits` and `dvalue`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64; N_ACTIONS],
        dvalue: f64,
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        if cache.generation != self.generation || cache.x.len() != self.obs_dim {
            return Err(PolicyError::StaleCache);
        }
        if grad.len() != self.theta.len() {
            return Err(PolicyError::Shape { expected: self.theta.len(), got: grad.len() });
        }
        let [l1, l2, la, lc] = self.layers();
        let mut dh2 = vec![0.0; l2.n_out];
        let mut tmp = vec![0.0; l2.n_out];
        dense_backward(&self.theta, &la, &cache.h2, dlogits, grad, Some(&mut dh2));
        dense_backward(&self.theta, &lc, &cache.h2, &[dvalue], grad, Some(&mut tmp));
        for ((d, t), h) in dh2.iter_mut().zip(&tmp).zip(&cache.h2) {
            *d = (*d + t) * self.activation.grad_from_output(*h);
        }
        let mut dh1 = vec![0.0; l1.n_out];
        dense_backward(&self.theta, &l2, &cache.h1, &dh2, grad, Some(&mut dh1));
        for (d, h) in dh1.iter_mut().zip(&cache.h1) {
            *d *= self.activation.grad_from_output(*h);
        }
        dense_backward(&self.theta, &l1, &cache.x, &dh1, grad, None);
        Ok(())
    }
}

/// Orthogonal `rows x cols` matrix (row-major) scaled by `gain`: the Gram
/// matrix of the smaller dimension equals `gain^2 I`.
pub fn orthogonal_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let (m, n) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(m, n, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let w = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * w[(i, j)]);
        }
    }
    out
}

pub fn log_softmax(logits: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let mut out = [0.0; N_ACTIONS];
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
    out
}

pub fn softmax(logits: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let mut p = log_softmax(logits);
    p.iter_mut().for_each(|v| *v = v.exp());
    p
}

pub fn entropy(logits: &[f64; N_ACTIONS]) -> f64 {
    let lp = log_softmax(logits);
    -lp.iter().map(|l| if *l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>()
}

/// Samples an action and returns it with its log-probability and the entropy.
pub fn sample_and_logprob<R: Rng + ?Sized>(logits: &[f64; N_ACTIONS], rng: &mut R) -> (usize, f64, f64) {
    let lp = log_softmax(logits);
    let u: f64 = rng.gen();
    let action = if u < lp[0].exp() { 0 } else { 1 };
    (action, lp[action], entropy(logits))
}

pub fn greedy(logits: &[f64; N_ACTIONS]) -> usize {
    if logits[1] > logits[0] {
        1
    } else {
        0
    }
}

/// Policy parameters plus everything needed to act and resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: PolicyParams,
    pub norm: FeatureNorm,
    pub lambda: f64,
    pub train_steps: u64,
    /// Problem the policy was trained on.
    pub problem_id: String,
}

impl Checkpoint {
    pub fn new(params: PolicyParams, norm: FeatureNorm, lambda: f64, train_steps: u64, problem_id: &str) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params,
            norm,
            lambda,
            train_steps,
            problem_id: problem_id.to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(PolicyError::Version(ck.format_version));
        }
        if ck.params.theta.len() != ck.params.n_params() {
            return Err(PolicyError::Invalid(format!(
                "{} parameters stored, shapes need {}",
                ck.params.theta.len(),
                ck.params.n_params()
            )));
        }
        if ck.norm.dim() != ck.params.obs_dim {
            return Err(PolicyError::Invalid("normalization and encoder input sizes differ".into()));
        }
        Ok(ck)
    }
}
