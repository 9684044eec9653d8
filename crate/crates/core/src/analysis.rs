//! Empirical convergence diagnostics over completed traces: gradient-norm
//! decay, cosine/norm-ratio bounds between velocities and gradients, a
//! sampled Lipschitz estimate and the resulting rate-bound constant.
//!
//! These are measurements. Nothing here fails when the measured running
//! average exceeds the bound; the two are reported side by side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{ModelArch, ModelError, ParamVector};
use crate::orchestrator::TrainingTrace;

/// Gradients below this norm are excluded from ratio statistics.
pub const GRAD_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("trace has no gradient records")]
    MissingGradients,
    #[error("degenerate trace: {0}")]
    Degenerate(String),
    #[error("probe error: {0}")]
    Probe(String),
    #[error("Lipschitz estimate must be positive, got {0}")]
    NonPositiveLipschitz(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormStats {
    /// Mean over workers of the squared gradient norm, per round.
    pub per_round: Vec<f64>,
    /// (1/t) * sum_{s <= t} per_round[s]
    pub running_avg: Vec<f64>,
    /// Slope of log(running_avg) against log(t); `None` when the series
    /// hits zero.
    pub exponent: Option<f64>,
    pub converged: bool,
}

pub fn running_average_stats(per_round: &[f64]) -> GradNormStats {
    let mut running_avg = Vec::with_capacity(per_round.len());
    let mut sum = 0.0;
    for (t, g) in per_round.iter().enumerate() {
        sum += g;
        running_avg.push(sum / (t + 1) as f64);
    }
    let converged = running_avg.last().is_some_and(|&r| r == 0.0);
    let exponent = if running_avg.len() >= 2 && running_avg.iter().all(|&r| r > 0.0) {
        let xs: Vec<f64> = (1..=running_avg.len()).map(|t| (t as f64).ln()).collect();
        let ys: Vec<f64> = running_avg.iter().map(|r| r.ln()).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    GradNormStats {
        per_round: per_round.to_vec(),
        running_avg,
        exponent,
        converged,
    }
}

pub fn grad_norm_stats(trace: &TrainingTrace) -> Result<GradNormStats, AnalysisError> {
    let per_round = trace
        .rounds
        .iter()
        .map(|r| {
            if r.workers.is_empty() {
                return Err(AnalysisError::MissingGradients);
            }
            let s: f64 = r.workers.iter().map(|w| w.grad_norm_sq).sum();
            Ok(s / r.workers.len() as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if per_round.is_empty() || per_round.iter().any(|g| !g.is_finite()) {
        return Err(AnalysisError::MissingGradients);
    }
    Ok(running_average_stats(&per_round))
}

/// Anything that yields a gradient at a parameter vector.
pub trait GradientOracle {
    fn gradient(&self, w: &ParamVector) -> Result<ParamVector, ModelError>;
}

/// The model's mean loss over a fixed dataset.
pub struct ModelObjective<'a> {
    pub arch: &'a ModelArch,
    pub data: &'a Dataset,
}

impl GradientOracle for ModelObjective<'_> {
    fn gradient(&self, w: &ParamVector) -> Result<ParamVector, ModelError> {
        self.arch.grad(w, self.data)
    }
}

/// Largest observed ratio |grad(a) - grad(b)| / |a - b| over all pairs of
/// `num_probes` points drawn uniformly from the ball of `radius` around
/// `center`. The probe sequence is a prefix-stable seeded stream, so the
/// estimate never decreases as probes are added.
pub fn estimate_lipschitz(
    oracle: &impl GradientOracle,
    center: &ParamVector,
    radius: f64,
    num_probes: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    if num_probes < 2 {
        return Err(AnalysisError::Probe(format!("need at least 2 probes, got {num_probes}")));
    }
    let n = center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(num_probes);
    for _ in 0..num_probes {
        let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = radius * rng.random::<f64>().powf(1.0 / n.max(1) as f64);
        let mut w = center.clone();
        if norm > 0.0 {
            for (wk, d) in w.values.iter_mut().zip(&dir) {
                *wk += r * d / norm;
            }
        }
        let g = oracle.gradient(&w)?;
        probes.push((w, g));
    }
    let mut best: Option<f64> = None;
    for a in 0..probes.len() {
        for b in a + 1..probes.len() {
            let dw = probes[a].0.sub(&probes[b].0).norm();
            if dw == 0.0 {
                continue;
            }
            let dg = probes[a].1.sub(&probes[b].1).norm();
            let ratio = dg / dw;
            best = Some(best.map_or(ratio, |m: f64| m.max(ratio)));
        }
    }
    best.ok_or_else(|| AnalysisError::Probe("all probe pairs coincide".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceBoundTerms {
    /// Trace mean of c0 - 1[loss rose] c1 - c2 (c0 - c1 - c2).
    pub k1: f64,
    /// Trace mean of c2 * 1[global loss fell] * 1[selected].
    pub k2: f64,
    /// Mean c2 over the trace.
    pub c2: f64,
    /// cos(v_i, -grad_i) range.
    pub q_lo_i: f64,
    pub q_hi_i: f64,
    /// cos(v_global, -grad_i) range.
    pub q_lo: f64,
    pub q_hi: f64,
    /// |v_i| / |grad_i| range.
    pub u_lo_i: f64,
    pub u_hi_i: f64,
    /// |v_global| / |grad_i| range.
    pub u_lo: f64,
    pub u_hi: f64,
    /// Worker-rounds skipped for a near-zero gradient.
    pub excluded: usize,
    pub counted: usize,
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

pub fn cosine_velocity_bounds(trace: &TrainingTrace) -> Result<ConvergenceBoundTerms, AnalysisError> {
    let records: Vec<_> = trace
        .rounds
        .iter()
        .flat_map(|r| r.workers.iter().map(move |w| (r, w)))
        .collect();
    if records.is_empty() {
        return Err(AnalysisError::MissingGradients);
    }
    let (kept, excluded): (Vec<_>, Vec<_>) = records
        .iter()
        .partition(|(_, w)| w.grad_norm_sq.sqrt() >= GRAD_EPS);
    if kept.is_empty() {
        return Err(AnalysisError::Degenerate(
            "every worker-round has a vanishing gradient".into(),
        ));
    }
    let g = |w: &crate::orchestrator::WorkerRecord| w.grad_norm_sq.sqrt();

    let degenerate = |what: &str| AnalysisError::Degenerate(format!("no defined {what}"));
    let (q_lo_i, q_hi_i) =
        range(kept.iter().filter_map(|(_, w)| w.cos_local)).ok_or_else(|| degenerate("local cosine"))?;
    let (q_lo, q_hi) =
        range(kept.iter().filter_map(|(_, w)| w.cos_global)).ok_or_else(|| degenerate("global cosine"))?;
    let (u_lo_i, u_hi_i) = range(kept.iter().map(|(_, w)| w.v_norm / g(w))).unwrap();
    let (u_lo, u_hi) = range(kept.iter().map(|(_, w)| w.global_v_norm / g(w))).unwrap();

    let n = records.len() as f64;
    let k1 = records
        .iter()
        .map(|(_, w)| {
            let rose = if w.local_loss_rose { 1.0 } else { 0.0 };
            w.c0 - rose * w.c1 - w.c2 * (w.c0 - w.c1 - w.c2)
        })
        .sum::<f64>()
        / n;
    let k2 = records
        .iter()
        .map(|(r, w)| {
            if r.global_loss_fell && w.selected {
                w.c2
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / n;
    let c2 = records.iter().map(|(_, w)| w.c2).sum::<f64>() / n;

    Ok(ConvergenceBoundTerms {
        k1,
        k2,
        c2,
        q_lo_i,
        q_hi_i,
        q_lo,
        q_hi,
        u_lo_i,
        u_hi_i,
        u_lo,
        u_hi,
        excluded: excluded.len(),
        counted: kept.len(),
    })
}

/// k1 u_i q_i + L k1 u_i^2 + (1 + c2)^2 / (2L) + k2 u q + L k2^2 u^2
#[allow(clippy::too_many_arguments)]
pub fn phi_bar(k1: f64, k2: f64, u_i: f64, q_i: f64, u: f64, q: f64, lipschitz: f64, c2: f64) -> Result<f64, AnalysisError> {
    if !(lipschitz > 0.0) {
        return Err(AnalysisError::NonPositiveLipschitz(lipschitz));
    }
    let l = lipschitz;
    Ok(k1 * u_i * q_i + l * k1 * u_i * u_i + (1.0 + c2).powi(2) / (2.0 * l) + k2 * u * q + l * k2 * k2 * u * u)
}

/// (F(w_0) - F_best) / (phi_bar * T)
pub fn theorem_rhs(initial_loss: f64, best_loss: f64, phi_bar: f64, rounds: usize) -> f64 {
    (initial_loss - best_loss) / (phi_bar * rounds as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub k1: f64,
    pub k2: f64,
    pub bounds: ConvergenceBoundTerms,
    #[serde(rename = "L_hat")]
    pub l_hat: f64,
    pub phi_bar: f64,
    pub rhs: f64,
    pub measured_running_avg: f64,
    pub exponent: Option<f64>,
    pub running_avg: Vec<f64>,
    /// 1 / L_hat, the step size the rate bound assumes.
    pub alpha_theory: f64,
    pub alpha_configured: f64,
    pub comm_upload_total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSettings {
    pub num_probes: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            num_probes: 12,
            radius: 0.5,
            seed: 0,
        }
    }
}

/// Full diagnostics for a trace. Lipschitz probes are centred on the final
/// global parameters.
pub fn diagnose(
    trace: &TrainingTrace,
    oracle: &impl GradientOracle,
    probes: ProbeSettings,
) -> Result<DiagnosticsReport, AnalysisError> {
    let stats = grad_norm_stats(trace)?;
    let bounds = cosine_velocity_bounds(trace)?;
    let l_hat = estimate_lipschitz(oracle, &trace.final_params, probes.radius, probes.num_probes, probes.seed)?;
    let phi = phi_bar(
        bounds.k1,
        bounds.k2,
        bounds.u_hi_i,
        bounds.q_hi_i,
        bounds.u_hi,
        bounds.q_hi,
        l_hat,
        bounds.c2,
    )?;
    let best_loss = trace
        .rounds
        .iter()
        .map(|r| r.global_loss)
        .fold(trace.initial_loss, f64::min);
    Ok(DiagnosticsReport {
        k1: bounds.k1,
        k2: bounds.k2,
        l_hat,
        phi_bar: phi,
        rhs: theorem_rhs(trace.initial_loss, best_loss, phi, trace.rounds.len()),
        measured_running_avg: *stats.running_avg.last().unwrap(),
        exponent: stats.exponent,
        running_avg: stats.running_avg,
        alpha_theory: 1.0 / l_hat,
        alpha_configured: trace.config.swarm.lr_init,
        comm_upload_total: trace.ledger.total_uploads(),
        bounds,
    })
}
