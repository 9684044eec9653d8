//! Label-distribution heterogeneity: Wasserstein distance between class
//! histograms, label-support ratio, the normalized non-i.i.d. degree and the
//! least-squares fit of its coefficients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabelHistogram;

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NonIidError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("input is not a probability vector (sum = {sum}, min = {min})")]
    NotNormalized { sum: f64, min: f64 },
    #[error("cost matrix must be square with nonnegative finite entries")]
    InvalidCost,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("singular design matrix: {0}")]
    Singular(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn check_probability(p: &[f64]) -> Result<(), NonIidError> {
    let sum: f64 = p.iter().sum();
    let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min >= 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|x| !x.is_finite()) {
        return Err(NonIidError::NotNormalized { sum, min });
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<(), NonIidError> {
    if p.len() != q.len() {
        return Err(NonIidError::LengthMismatch(p.len(), q.len()));
    }
    check_probability(p)?;
    check_probability(q)
}

/// Exact 1-D optimal transport cost between two class distributions with
/// ground cost |i - j| on class indices: the L1 distance between CDFs.
pub fn wasserstein_1d(p: &[f64], q: &[f64]) -> Result<f64, NonIidError> {
    check_pair(p, q)?;
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    // The last CDF difference is 1 - 1 and carries no cost.
    for k in 0..p.len().saturating_sub(1) {
        cdf_gap += p[k] - q[k];
        total += cdf_gap.abs();
    }
    Ok(total)
}

/// |i - j| cost matrix on `l` class indices.
pub fn linear_ground_cost(l: usize) -> Vec<Vec<f64>> {
    (0..l)
        .map(|i| (0..l).map(|j| (i as f64 - j as f64).abs()).collect())
        .collect()
}

/// Joint distribution with marginals `p` (rows) and `q` (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: Vec<Vec<f64>>,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.matrix.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n = self.matrix.first().map_or(0, Vec::len);
        (0..n)
            .map(|j| self.matrix.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.matrix
            .iter()
            .zip(cost)
            .map(|(r, c)| r.iter().zip(c).map(|(g, c)| g * c).sum::<f64>())
            .sum()
    }
}

const FLOW_EPS: f64 = 1e-15;

/// Solves the discrete transport program exactly by successive shortest
/// augmenting paths on the bipartite flow network, for an arbitrary
/// nonnegative cost matrix.
pub fn wasserstein_lp_oracle(
    p: &[f64],
    q: &[f64],
    cost: &[Vec<f64>],
) -> Result<(f64, TransportPlan), NonIidError> {
    check_pair(p, q)?;
    let n = p.len();
    if cost.len() != n
        || cost
            .iter()
            .any(|r| r.len() != n || r.iter().any(|c| !c.is_finite() || *c < 0.0))
    {
        return Err(NonIidError::InvalidCost);
    }

    let mut supply = p.to_vec();
    let mut demand = q.to_vec();
    let mut flow = vec![vec![0.0; n]; n];

    // Residual graph: rows 0..n, columns n..2n. Forward arcs row->col have
    // infinite capacity at cost c; backward arcs col->row carry existing flow
    // at cost -c. Bellman-Ford from all rows with remaining supply.
    loop {
        let sources: Vec<usize> = (0..n).filter(|&i| supply[i] > FLOW_EPS).collect();
        if sources.is_empty() {
            break;
        }
        let mut dist = vec![f64::INFINITY; 2 * n];
        let mut pred = vec![usize::MAX; 2 * n];
        for &i in &sources {
            dist[i] = 0.0;
        }
        for _ in 0..2 * n {
            let mut changed = false;
            for i in 0..n {
                if dist[i].is_finite() {
                    for j in 0..n {
                        let d = dist[i] + cost[i][j];
                        if d < dist[n + j] - 1e-15 {
                            dist[n + j] = d;
                            pred[n + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..n {
                if dist[n + j].is_finite() {
                    for i in 0..n {
                        if flow[i][j] > FLOW_EPS {
                            let d = dist[n + j] - cost[i][j];
                            if d < dist[i] - 1e-15 {
                                dist[i] = d;
                                pred[i] = n + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let target = (0..n)
            .filter(|&j| demand[j] > FLOW_EPS && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].partial_cmp(&dist[n + b]).unwrap());
        let Some(target) = target else {
            break;
        };

        // Walk back to find the path and its bottleneck.
        let mut path = Vec::new();
        let mut node = n + target;
        let mut bottleneck = demand[target];
        while pred[node] != usize::MAX {
            let prev = pred[node];
            path.push((prev, node));
            if prev >= n {
                // backward arc col(prev) -> row(node)
                bottleneck = bottleneck.min(flow[node][prev - n]);
            }
            node = prev;
        }
        bottleneck = bottleneck.min(supply[node]);
        for &(from, to) in &path {
            if from < n {
                flow[from][to - n] += bottleneck;
            } else {
                flow[to][from - n] -= bottleneck;
            }
        }
        supply[node] -= bottleneck;
        demand[target] -= bottleneck;
    }

    let plan = TransportPlan { matrix: flow };
    let total = plan.cost(cost);
    Ok((total, plan))
}

/// Wasserstein distance and label-support ratio of one worker against the
/// global histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityComponents {
    pub wd: f64,
    pub label_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeCoefficients {
    pub beta1: f64,
    pub beta2: f64,
    pub phi: f64,
}

impl Default for DegreeCoefficients {
    /// The CIFAR10 fit.
    fn default() -> Self {
        Self {
            beta1: 0.286,
            beta2: -0.07,
            phi: 0.592,
        }
    }
}

impl DegreeCoefficients {
    pub fn score(&self, c: &HeterogeneityComponents) -> f64 {
        self.beta1 * c.label_ratio + self.beta2 * c.wd + self.phi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonIidDegreeVector {
    pub components: Vec<HeterogeneityComponents>,
    pub raw: Vec<f64>,
    pub eta: Vec<f64>,
}

impl NonIidDegreeVector {
    /// The degree as consumed by selection; `complement` substitutes 1 - eta.
    pub fn oriented(&self, complement: bool) -> Vec<f64> {
        if complement {
            self.eta.iter().map(|e| 1.0 - e).collect()
        } else {
            self.eta.clone()
        }
    }
}

pub fn heterogeneity_components(
    worker: &LabelHistogram,
    global: &LabelHistogram,
) -> Result<HeterogeneityComponents, NonIidError> {
    if worker.num_classes() != global.num_classes() {
        return Err(NonIidError::LengthMismatch(
            worker.num_classes(),
            global.num_classes(),
        ));
    }
    let p = worker
        .proportions()
        .ok_or_else(|| NonIidError::Domain("empty worker histogram".into()))?;
    let q = global
        .proportions()
        .ok_or_else(|| NonIidError::Domain("empty global histogram".into()))?;
    Ok(HeterogeneityComponents {
        wd: wasserstein_1d(&p, &q)?,
        label_ratio: worker.support() as f64 / global.support() as f64,
    })
}

/// Min-max scaling; a constant input maps to 0.5 everywhere.
pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|r| (r - min) / (max - min)).collect()
}

pub fn noniid_degree(
    workers: &[LabelHistogram],
    global: &LabelHistogram,
    coeffs: &DegreeCoefficients,
) -> Result<NonIidDegreeVector, NonIidError> {
    if workers.is_empty() {
        return Err(NonIidError::Domain("no workers".into()));
    }
    let components = workers
        .iter()
        .map(|w| heterogeneity_components(w, global))
        .collect::<Result<Vec<_>, _>>()?;
    let raw: Vec<f64> = components.iter().map(|c| coeffs.score(c)).collect();
    let eta = min_max_normalize(&raw);
    Ok(NonIidDegreeVector {
        components,
        raw,
        eta,
    })
}

/// One (label ratio, Wasserstein distance, accuracy) record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub label_ratio: f64,
    pub wd: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFit {
    pub coefficients: DegreeCoefficients,
    pub r_squared: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Least squares via Householder QR. `rows` are design rows, `y` targets.
fn least_squares(rows: &[[f64; 3]], y: &[f64]) -> Result<[f64; 3], NonIidError> {
    let m = rows.len();
    let mut a: Vec<[f64; 3]> = rows.to_vec();
    let mut b = y.to_vec();
    let scale = (0..3)
        .map(|k| a.iter().map(|r| r[k] * r[k]).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for k in 0..3 {
        let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm <= 1e-10 * scale {
            return Err(NonIidError::Singular(format!(
                "column {k} of (label_ratio, wd, 1) is linearly dependent on the others"
            )));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..3 {
                let dot: f64 = (k..m).map(|i| v[i - k] * a[i][j]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..m {
                    a[i][j] -= f * v[i - k];
                }
            }
            let dot: f64 = (k..m).map(|i| v[i - k] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                b[i] -= f * v[i - k];
            }
        }
    }
    let mut x = [0.0; 3];
    for k in (0..3).rev() {
        let s: f64 = (k + 1..3).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    Ok(x)
}

fn r_squared(obs: &[Observation], c: &DegreeCoefficients) -> Option<f64> {
    let mean = obs.iter().map(|o| o.accuracy).sum::<f64>() / obs.len() as f64;
    let ss_tot: f64 = obs.iter().map(|o| (o.accuracy - mean).powi(2)).sum();
    let ss_res: f64 = obs
        .iter()
        .map(|o| {
            let pred = c.beta1 * o.label_ratio + c.beta2 * o.wd + c.phi;
            (o.accuracy - pred).powi(2)
        })
        .sum();
    (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot)
}

/// Ordinary least squares of accuracy on (label_ratio, wd, 1).
///
/// A seeded shuffle holds out 10% of the records (at least one) and R² is
/// reported on that held-out part. When the held-out accuracies have no
/// variance the R² falls back to the full set.
pub fn fit_coefficients(observations: &[Observation], seed: u64) -> Result<CoefficientFit, NonIidError> {
    if observations.len() < 4 {
        return Err(NonIidError::Domain(format!(
            "need at least 4 observations, got {}",
            observations.len()
        )));
    }
    let mut order: Vec<usize> = (0..observations.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_size = ((observations.len() as f64 * 0.1).round() as usize).max(1);
    let (test_idx, train_idx) = order.split_at(test_size);

    let rows: Vec<[f64; 3]> = train_idx
        .iter()
        .map(|&i| [observations[i].label_ratio, observations[i].wd, 1.0])
        .collect();
    let y: Vec<f64> = train_idx.iter().map(|&i| observations[i].accuracy).collect();
    let [beta1, beta2, phi] = least_squares(&rows, &y)?;
    let coefficients = DegreeCoefficients { beta1, beta2, phi };

    let test: Vec<Observation> = test_idx.iter().map(|&i| observations[i]).collect();
    let r_squared = r_squared(&test, &coefficients)
        .or_else(|| r_squared(observations, &coefficients))
        .unwrap_or(1.0);
    Ok(CoefficientFit {
        coefficients,
        r_squared,
        train_size: train_idx.len(),
        test_size,
    })
}

pub fn write_observations(path: &Path, observations: &[Observation]) -> Result<(), NonIidError> {
    write_observations_to(std::fs::File::create(path).map_err(csv::Error::from)?, observations)
}

/// CSV with header `label_ratio,wd,accuracy`.
pub fn write_observations_to<W: std::io::Write>(out: W, observations: &[Observation]) -> Result<(), NonIidError> {
    let mut w = csv::Writer::from_writer(out);
    for o in observations {
        w.serialize(o)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<Vec<Observation>, NonIidError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["label_ratio", "wd", "accuracy"] {
        return Err(NonIidError::Domain(format!(
            "expected header label_ratio,wd,accuracy, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize().map(|o| o.map_err(NonIidError::from)).collect()
}
