//! Hybrid particle-swarm / gradient update with one-step local and global
//! best memory, and the per-(round, worker) coefficient stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{ModelArch, ModelError, ParamVector};

#[derive(Debug, Error, PartialEq)]
pub enum SwarmError {
    #[error("parameters diverged (non-finite) at round {round}, worker {worker}")]
    Divergence { round: usize, worker: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwarmCoefficients {
    /// inertia
    pub c0: f64,
    /// attraction to the local best
    pub c1: f64,
    /// attraction to the global best
    pub c2: f64,
    pub lr: f64,
}

fn default_lr_init() -> f64 {
    0.01
}
fn default_gamma() -> f64 {
    0.5
}
fn default_decay_period() -> usize {
    10
}

/// How coefficients and the learning rate evolve over rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmConfig {
    #[serde(default = "default_lr_init")]
    pub lr_init: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_decay_period")]
    pub decay_period: usize,
    #[serde(default)]
    pub seed: u64,
    /// Use the fixed `c0`, `c1`, `c2` below instead of sampling.
    #[serde(default)]
    pub freeze: bool,
    #[serde(default)]
    pub c0: f64,
    #[serde(default)]
    pub c1: f64,
    #[serde(default)]
    pub c2: f64,
    /// Classic PSO: scale c1 and c2 by independent U(0,1) draws.
    #[serde(default)]
    pub random_scaling: bool,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self {
            lr_init: default_lr_init(),
            gamma: default_gamma(),
            decay_period: default_decay_period(),
            seed: 0,
            freeze: false,
            c0: 0.0,
            c1: 0.0,
            c2: 0.0,
            random_scaling: false,
        }
    }
}

impl SwarmConfig {
    /// Fixed coefficients, useful for ablations.
    pub fn frozen(c0: f64, c1: f64, c2: f64) -> Self {
        Self {
            freeze: true,
            c0,
            c1,
            c2,
            ..Self::default()
        }
    }

    /// lr_init * gamma^floor(t / decay_period)
    pub fn lr_at(&self, round: usize) -> f64 {
        let steps = round / self.decay_period.max(1);
        self.lr_init * self.gamma.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.decay_period == 0 {
            return Err("decay_period must be at least 1".into());
        }
        if ![self.c0, self.c1, self.c2].iter().all(|c| c.is_finite()) {
            return Err("swarm coefficients must be finite".into());
        }
        Ok(())
    }
}

/// Counter-based coefficient draw: c0 ~ U(0,1), c1, c2 ~ N(0,1) from a
/// stream keyed on (seed, round, worker), so results do not depend on the
/// order in which workers are processed.
pub fn sample_coefficients(cfg: &SwarmConfig, round: usize, worker: usize) -> SwarmCoefficients {
    let lr = cfg.lr_at(round);
    if cfg.freeze {
        return SwarmCoefficients {
            c0: cfg.c0,
            c1: cfg.c1,
            c2: cfg.c2,
            lr,
        };
    }
    let mut rng = stream(cfg.seed, round, worker, 0);
    let c0: f64 = rng.random();
    let mut c1: f64 = rng.sample(StandardNormal);
    let mut c2: f64 = rng.sample(StandardNormal);
    if cfg.random_scaling {
        c1 *= rng.random::<f64>();
        c2 *= rng.random::<f64>();
    }
    SwarmCoefficients { c0, c1, c2, lr }
}

/// Independent ChaCha stream for (seed, round, worker, purpose).
pub fn stream(seed: u64, round: usize, worker: usize, purpose: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(purpose) << 56));
    rng.set_stream(((round as u64) << 32) | worker as u64);
    rng
}

/// One worker's swarm state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub id: usize,
    /// Latest local model.
    pub w: ParamVector,
    /// Local model of the round before.
    pub w_prev: ParamVector,
    pub v: ParamVector,
    pub w_local_best: ParamVector,
    pub f_prev: Option<f64>,
    pub f_curr: Option<f64>,
    pub eta: f64,
    pub theta: f64,
}

impl WorkerState {
    pub fn new(id: usize, w0: &ParamVector, eta: f64) -> Self {
        Self {
            id,
            w: w0.clone(),
            w_prev: w0.clone(),
            v: ParamVector::zeros(w0.len()),
            w_local_best: w0.clone(),
            f_prev: None,
            f_curr: None,
            eta,
            theta: 0.0,
        }
    }

    /// Shifts the loss/parameter memory after a new local model is evaluated.
    pub fn record(&mut self, w: ParamVector, f: f64) {
        self.w_prev = std::mem::replace(&mut self.w, w);
        self.f_prev = self.f_curr.replace(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub w: ParamVector,
    pub w_prev: ParamVector,
    pub w_global_best: ParamVector,
    pub f_prev: Option<f64>,
    pub f_curr: Option<f64>,
    pub v: ParamVector,
}

impl GlobalState {
    pub fn new(w0: ParamVector) -> Self {
        Self {
            w_prev: w0.clone(),
            w_global_best: w0.clone(),
            v: ParamVector::zeros(w0.len()),
            w: w0,
            f_prev: None,
            f_curr: None,
        }
    }

    /// Installs the aggregated model and its evaluation loss.
    pub fn advance(&mut self, w: ParamVector, f: f64) {
        self.w_prev = std::mem::replace(&mut self.w, w);
        self.v = self.w.sub(&self.w_prev);
        self.f_prev = self.f_curr.replace(f);
    }
}

/// The lower-loss candidate of the last two; a rise in loss keeps the older
/// parameters, ties and missing history keep the newer ones.
fn best_of_two(
    older: &ParamVector,
    newer: &ParamVector,
    f_older: Option<f64>,
    f_newer: Option<f64>,
) -> ParamVector {
    match (f_older, f_newer) {
        (Some(a), Some(b)) if b > a => older.clone(),
        _ => newer.clone(),
    }
}

pub fn update_local_best(ws: &WorkerState) -> ParamVector {
    best_of_two(&ws.w_prev, &ws.w, ws.f_prev, ws.f_curr)
}

pub fn update_global_best(gs: &GlobalState) -> ParamVector {
    best_of_two(&gs.w_prev, &gs.w, gs.f_prev, gs.f_curr)
}

/// w + c0 v + c1 (local_best - w) + c2 (global_best - w) + displacement,
/// with componentwise attraction terms.
pub fn swarm_move(
    w: &ParamVector,
    v: &ParamVector,
    local_best: &ParamVector,
    global_best: &ParamVector,
    coeffs: &SwarmCoefficients,
    displacement: &ParamVector,
) -> ParamVector {
    let values = w
        .values
        .iter()
        .zip(&v.values)
        .zip(&local_best.values)
        .zip(&global_best.values)
        .zip(&displacement.values)
        .map(|((((&wk, &vk), &lk), &gk), &dk)| {
            let mut x = wk;
            x += coeffs.c0 * vk;
            x += coeffs.c1 * (lk - wk);
            x += coeffs.c2 * (gk - wk);
            x + dk
        })
        .collect();
    ParamVector::from_vec(values)
}

/// One hybrid step on a minibatch (rows `batch` of `data`):
/// new_w = w + c0 v + c1 (w_l - w) + c2 (w_g - w) - lr grad F(w),
/// new_v = new_w - w.
#[allow(clippy::too_many_arguments)]
pub fn pso_sgd_step(
    ws: &WorkerState,
    gs: &GlobalState,
    coeffs: &SwarmCoefficients,
    model: &ModelArch,
    data: &Dataset,
    batch: &[usize],
    round: usize,
) -> Result<(ParamVector, ParamVector), SwarmError> {
    let mut step = model.grad_on(&ws.w, data, batch)?;
    step.values.iter_mut().for_each(|g| *g = -(coeffs.lr * *g));
    let new_w = swarm_move(&ws.w, &ws.v, &ws.w_local_best, &gs.w_global_best, coeffs, &step);
    if !new_w.is_finite() {
        return Err(SwarmError::Divergence {
            round,
            worker: ws.id,
        });
    }
    let new_v = new_w.sub(&ws.w);
    Ok((new_w, new_v))
}

/// Plain gradient step w - lr grad F(w).
pub fn sgd_step(
    w: &ParamVector,
    lr: f64,
    model: &ModelArch,
    data: &Dataset,
    batch: &[usize],
) -> Result<ParamVector, ModelError> {
    let g = model.grad_on(w, data, batch)?;
    Ok(ParamVector::from_vec(
        w.values.iter().zip(&g.values).map(|(wk, gk)| wk - lr * gk).collect(),
    ))
}
